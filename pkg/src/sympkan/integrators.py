"""ODE integrators sampling a vector field at requested output times.

``rk45`` steps scipy's Dormand-Prince stepper by hand so that blow-ups and
runaway step counts can be caught; ``rk4`` and ``leapfrog`` are fixed-step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

from .errors import IntegrationError, SingularityError

__all__ = ["Solution", "leapfrog", "rk4", "rk45", "solve"]


@dataclass
class Solution:
    times: np.ndarray
    states: np.ndarray
    diverged: bool = False
    message: str = ""
    n_steps: int = 0


def _check_times(times):
    times = np.asarray(times, dtype=np.float64).ravel()
    if times.size == 0:
        raise ValueError("no output times requested")
    if np.any(np.diff(times) <= 0):
        raise ValueError("output times must be strictly increasing")
    return times


def rk45(fun, z0, times, rtol=1e-10, atol=1e-10, max_steps=200_000, bound=None, on_failure="raise"):
    """Adaptive Dormand-Prince integration of ``dz/dt = fun(t, z)``.

    With ``on_failure="truncate"`` a step failure, a non-finite state or a
    state whose max-norm exceeds ``bound`` ends the run early and the samples
    gathered so far are returned with ``diverged=True``.
    """
    times = _check_times(times)
    z0 = np.asarray(z0, dtype=np.float64)
    out = np.empty((times.size, z0.size))
    out[0] = z0
    if times.size == 1:
        return Solution(times, out)

    def fail(msg, t_last, filled):
        if on_failure == "raise":
            raise IntegrationError(msg, last_time=t_last)
        return Solution(times[:filled], out[:filled], diverged=True, message=msg, n_steps=steps)

    steps = 0
    filled = 1
    try:
        solver = RK45(fun, times[0], z0, times[-1], rtol=rtol, atol=atol)
        while filled < times.size:
            t_prev = solver.t
            msg = solver.step()
            steps += 1
            if solver.status == "failed":
                return fail(f"step failed: {msg}", t_prev, filled)
            if not np.all(np.isfinite(solver.y)):
                return fail("non-finite state", t_prev, filled)
            if bound is not None and np.max(np.abs(solver.y)) > bound:
                return fail(f"state left the bound {bound:g}", t_prev, filled)
            hi = np.searchsorted(times, solver.t, side="right")
            if hi > filled:
                dense = solver.dense_output()
                out[filled:hi] = dense(times[filled:hi]).T
                filled = hi
            if steps >= max_steps and filled < times.size:
                return fail(f"exceeded {max_steps} steps", solver.t, filled)
    except SingularityError as exc:
        return fail(str(exc), solver.t if "solver" in locals() else times[0], filled)
    return Solution(times, out, n_steps=steps)


def _fixed_step(step, z0, times, dt):
    times = _check_times(times)
    z = np.asarray(z0, dtype=np.float64).copy()
    out = np.empty((times.size, z.size))
    out[0] = z
    t = times[0]
    steps = 0
    for i in range(1, times.size):
        span = times[i] - t
        n = max(1, int(np.ceil(span / dt - 1e-9)))
        h = span / n
        for _ in range(n):
            z = step(t, z, h)
            t += h
            steps += 1
        t = times[i]
        out[i] = z
    return Solution(times, out, n_steps=steps)


def rk4(fun, z0, times, dt=1e-2):
    """Classical fourth-order Runge-Kutta with step at most ``dt``."""

    def step(t, z, h):
        k1 = fun(t, z)
        k2 = fun(t + 0.5 * h, z + 0.5 * h * k1)
        k3 = fun(t + 0.5 * h, z + 0.5 * h * k2)
        k4 = fun(t + h, z + h * k3)
        return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return _fixed_step(step, z0, times, dt)


def leapfrog(dHdq, dHdp, z0, times, dt=1e-2):
    """Kick-drift-kick Stormer-Verlet for a separable Hamiltonian.

    ``dHdq(q)`` and ``dHdp(p)`` are the partial gradients; the state is
    ``z = [q; p]``.
    """
    d = np.size(z0) // 2

    def step(t, z, h):
        q, p = z[:d], z[d:]
        p_half = p - 0.5 * h * dHdq(q)
        q_new = q + h * dHdp(p_half)
        p_new = p_half - 0.5 * h * dHdq(q_new)
        return np.concatenate([q_new, p_new])

    return _fixed_step(step, z0, times, dt)


def solve(fun, z0, times, method="rk45", **kwargs):
    if method == "rk45":
        return rk45(fun, z0, times, **kwargs)
    if method == "rk4":
        return rk4(fun, z0, times, **kwargs)
    raise ValueError(f"unknown method {method!r} (leapfrog needs split gradients)")
