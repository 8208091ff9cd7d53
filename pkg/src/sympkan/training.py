"""Losses, optimizers and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ModelKindError, NumericalError, UsageError
from .models import BaselineNet, KarHamiltonian, MlpHamiltonian, predicted_field_node, save_model

__all__ = [
    "AdamState",
    "LbfgsState",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "baseline_loss",
    "build_model",
    "dataset_loss",
    "hnn_loss",
    "lbfgs_step",
    "loss_and_grad",
    "train",
]

log = logging.getLogger(__name__)


def _batch_arrays(batch):
    states, derivs = batch
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    derivs = np.atleast_2d(np.asarray(derivs, dtype=np.float64))
    if states.shape[0] == 0:
        raise UsageError("empty batch")
    if states.shape != derivs.shape:
        raise ValueError(f"states {states.shape} and derivatives {derivs.shape} differ")
    return states, derivs


def _mse_node(pred, derivs):
    r = pred - derivs
    return dc.sum(r * r) / float(derivs.shape[0])


def hnn_loss(model, batch):
    """Mean over samples of ``|dq - dH/dp|^2 + |dp + dH/dq|^2``."""
    if not isinstance(model, (MlpHamiltonian, KarHamiltonian)):
        raise ModelKindError(f"{type(model).__name__} is not a Hamiltonian model")
    states, derivs = _batch_arrays(batch)
    return _mse_node(predicted_field_node(model, dc.constant(states)), derivs)


def baseline_loss(net, batch):
    """Mean over samples of ``|dz - net(z)|^2``."""
    if not isinstance(net, BaselineNet):
        raise ModelKindError(f"{type(net).__name__} is not a baseline network")
    states, derivs = _batch_arrays(batch)
    return _mse_node(predicted_field_node(net, dc.constant(states)), derivs)


def loss_node(model, batch):
    return baseline_loss(model, batch) if isinstance(model, BaselineNet) else hnn_loss(model, batch)


def loss_and_grad(model, batch):
    root = loss_node(model, batch)
    value = float(dc.forward(root))
    return value, dc.backward(root)


def dataset_loss(model, states, derivs):
    """Same quantity as the training loss, evaluated without a graph."""
    r = model.field(states) - derivs
    return float(np.mean(np.sum(r * r, axis=-1)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with decoupled weight decay; returns new params.

    ``state`` is updated in place.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient; Adam step rejected")
    if state.m.shape != np.shape(params):
        raise ValueError("optimizer state does not match parameter vector")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return params * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class LbfgsState:
    memory: int = 10
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    c1: float = 1e-4
    shrink: float = 0.5
    max_trials: int = 25
    curvature_eps: float = 1e-10
    initial_step: float = 1.0
    n_evals: int = 0
    n_fallbacks: int = 0

    def clear(self):
        self.s.clear()
        self.y.clear()

    def direction(self, g):
        """Two-loop recursion: ``-H g`` from the stored pairs."""
        if not self.s:
            return -g * min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        s, y = self.s[-1], self.y[-1]
        r = q * ((s @ y) / (y @ y))
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ r)
            r += s * (a - b)
        return -r


def _armijo(closure, x, f0, g0, d, state):
    slope = g0 @ d
    alpha = state.initial_step
    for _ in range(state.max_trials):
        x_new = x + alpha * d
        f_new, g_new = closure(x_new)
        state.n_evals += 1
        if np.isfinite(f_new) and f_new <= f0 + state.c1 * alpha * slope:
            return x_new, f_new, g_new
        alpha *= state.shrink
    return None


def lbfgs_step(params, closure, state, f0=None, g0=None):
    """One L-BFGS iteration with backtracking Armijo line search.

    ``closure(x)`` returns ``(loss, gradient)``.  Returns
    ``(new_params, new_loss, new_grad)``; a step is only taken if it lowers
    the loss.  When the quasi-Newton line search fails the history is
    dropped and a steepest-descent search is tried instead.
    """
    x = np.asarray(params, dtype=np.float64)
    if f0 is None or g0 is None:
        f0, g0 = closure(x)
        state.n_evals += 1
    if not np.all(np.isfinite(g0)):
        raise NumericalError("non-finite gradient in L-BFGS")
    d = state.direction(g0)
    if g0 @ d >= 0:
        state.clear()
        d = state.direction(g0)
    found = _armijo(closure, x, f0, g0, d, state)
    if found is None:
        state.clear()
        state.n_fallbacks += 1
        d = -g0 / max(np.linalg.norm(g0), 1e-300)
        found = _armijo(closure, x, f0, g0, d, state)
        if found is None:
            return x, f0, g0
    x_new, f_new, g_new = found
    s, y = x_new - x, g_new - g0
    if s @ y > state.curvature_eps:
        state.s.append(s)
        state.y.append(y)
        if len(state.s) > state.memory:
            state.s.pop(0)
            state.y.pop(0)
    return x_new, f_new, g_new


@dataclass
class TrainConfig:
    """Everything needed to train one model family on one dataset.

    ``arch`` holds ``hidden`` for the perceptrons or ``hidden``/``G``/``k``
    for KAR (``hidden`` are the inner layer widths).  ``batch_size=None``
    means full batch.
    """

    model: str
    arch: dict
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 2000
    batch_size: int | None = None
    seed: int = 0
    memory: int = 10
    max_trials: int = 25
    inner_iters: int = 1
    grid_update_every: int = 0
    grid_update_until: int = 0

    def __post_init__(self):
        if self.model not in ("baseline", "hnn", "kar"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.optimizer not in ("adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grid_update_every and self.model != "kar":
            raise ValueError("grid updates apply to KAR models only")
        if self.lr <= 0 or self.steps < 1 or self.inner_iters < 1 or (self.batch_size is not None and self.batch_size < 1):
            raise ValueError("need lr > 0, steps >= 1 and batch_size >= 1")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    ms: list = field(default_factory=list)
    train_loss: float = float("nan")
    test_loss: float = float("nan")

    def __len__(self):
        return len(self.loss)

    def record(self, loss, grad_norm, ms):
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.ms.append(float(ms))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "ms"])
            for i, row in enumerate(zip(self.loss, self.grad_norm, self.ms)):
                w.writerow([i, repr(row[0]), repr(row[1]), f"{row[2]:.3f}"])


def build_model(config, dim, train_states, rng):
    arch = config.arch
    if config.model == "baseline":
        return BaselineNet(dim, arch.get("hidden", (200, 200)), rng)
    if config.model == "hnn":
        return MlpHamiltonian(dim, arch.get("hidden", (200, 200)), rng)
    widths = [dim, *arch["hidden"], 1]
    return KarHamiltonian.initialize(widths, arch["G"], arch["k"], train_states, rng)


class _Batcher:
    """Shuffled minibatches without replacement, reshuffled every epoch."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.size = n if batch_size is None else min(batch_size, n)
        self.rng = rng
        self.perm = np.arange(n)
        self.pos = n

    def next(self):
        if self.size == self.n:
            return self.perm
        if self.pos + self.size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.size]
        self.pos += self.size
        return idx


def train(config, dataset, out_path=None, checkpoint_path=None, model=None):
    """Fit one model to ``dataset.train``; returns ``(model, history)``.

    On a numerical failure the last good parameters are written to
    ``checkpoint_path`` (or ``out_path``) before the error propagates.
    """
    rng = np.random.default_rng(config.seed)
    states, derivs = dataset.stack("train")
    if model is None:
        model = build_model(config, dataset.system.dim, states, rng)
    elif model.dim != states.shape[-1]:
        raise ValueError("model and dataset dimensions differ")
    batcher = _Batcher(len(states), config.batch_size, rng)
    history = TrainHistory()
    theta = model.store.theta.copy()

    def closure(idx):
        def f(x):
            model.store.set_flat(x)
            try:
                return loss_and_grad(model, (states[idx], derivs[idx]))
            except NumericalError:
                return float("inf"), np.full_like(x, np.nan)
        return f

    adam = AdamState.zeros(model.n_params)
    grid_sample = states[np.linspace(0, len(states) - 1, min(len(states), 2000)).astype(int)]
    lbfgs = LbfgsState(memory=config.memory, max_trials=config.max_trials, initial_step=config.lr)
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            if config.grid_update_every and step < config.grid_update_until and step % config.grid_update_every == 0:
                model.store.set_flat(theta)
                model.update_hidden_grids(grid_sample)
                theta = model.store.theta.copy()
                # curvature pairs refer to the old coefficients
                lbfgs.clear()
            idx = batcher.next()
            if config.optimizer == "adam":
                model.store.set_flat(theta)
                loss, grad = loss_and_grad(model, (states[idx], derivs[idx]))
                theta = adam_step(theta, grad, adam, config.lr, config.weight_decay)
            else:
                f = closure(idx)
                f0, g0 = f(theta)
                if not np.isfinite(f0):
                    raise NumericalError("non-finite loss at the current parameters")
                # several quasi-Newton iterations share one minibatch
                x, fx, gx = theta, f0, g0
                for _ in range(config.inner_iters):
                    x, fx, gx = lbfgs_step(x, f, lbfgs, fx, gx)
                theta, loss, grad = x, f0, g0
            history.record(loss, np.linalg.norm(grad), 1e3 * (time.perf_counter() - t0))
    except NumericalError:
        model.store.set_flat(theta)
        path = checkpoint_path or out_path
        if path is not None:
            save_model(model, path)
        raise
    model.store.set_flat(theta)
    history.train_loss = dataset_loss(model, states, derivs)
    if dataset.test:
        history.test_loss = dataset_loss(model, *dataset.stack("test"))
    if out_path is not None:
        save_model(model, out_path)
    log.info("%s: train %.4g test %.4g", config.model, history.train_loss, history.test_loss)
    return model, history
