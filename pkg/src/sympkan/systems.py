"""Ground-truth Hamiltonian systems and trajectory datasets.

State vectors are flat ``z = [q; p]`` arrays with trailing dimension ``2d``.
Planar n-body positions are stored body by body: ``q = [x1, y1, x2, y2, ...]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import integrators
from .errors import FormatError, IntegrationError, ShapeError, SingularityError

__all__ = [
    "Dataset",
    "PhaseState",
    "SamplerRules",
    "SystemSpec",
    "Trajectory",
    "add_noise",
    "build_dataset",
    "hamiltonian",
    "integrate",
    "nominal_period",
    "read_dataset",
    "sample_initial_conditions",
    "split_gradient",
    "true_vector_field",
    "write_dataset",
]

KINDS = ("spring_mass", "pendulum", "two_body", "three_body")
_MIN_SEPARATION = 1e-9


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    masses: tuple = (1.0,)
    spring_k: float = 1.0
    length: float = 1.0
    gravity: float = 3.0
    G: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system {self.kind!r}; expected one of {KINDS}")
        if any(m <= 0 for m in self.masses):
            raise ValueError("masses must be positive")
        if self.kind in ("spring_mass", "pendulum") and len(self.masses) != 1:
            raise ValueError(f"{self.kind} has a single mass")
        if self.kind == "two_body" and len(self.masses) != 2:
            raise ValueError("two_body needs two masses")
        if self.kind == "three_body" and len(self.masses) != 3:
            raise ValueError("three_body needs three masses")

    @classmethod
    def spring_mass(cls, m=1.0, k=1.0):
        return cls("spring_mass", masses=(m,), spring_k=k)

    @classmethod
    def pendulum(cls, m=0.5, length=1.0, g=3.0):
        return cls("pendulum", masses=(m,), length=length, gravity=g)

    @classmethod
    def two_body(cls, m1=1.0, m2=1.0, G=1.0):
        return cls("two_body", masses=(m1, m2), G=G)

    @classmethod
    def three_body(cls, masses=(1.0, 1.0, 1.0), G=1.0):
        return cls("three_body", masses=tuple(masses), G=G)

    @property
    def n_bodies(self):
        return len(self.masses) if self.kind in ("two_body", "three_body") else 0

    @property
    def d(self):
        return 2 * self.n_bodies if self.n_bodies else 1

    @property
    def dim(self):
        return 2 * self.d

    def to_dict(self):
        return {
            "kind": self.kind,
            "masses": list(self.masses),
            "spring_k": self.spring_k,
            "length": self.length,
            "gravity": self.gravity,
            "G": self.G,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["masses"] = tuple(data["masses"])
        return cls(**data)


@dataclass
class PhaseState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        if self.q.shape != self.p.shape:
            raise ShapeError(f"q has shape {self.q.shape} but p has {self.p.shape}")

    @property
    def z(self):
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_z(cls, z):
        z = np.asarray(z, dtype=np.float64)
        d = z.shape[-1] // 2
        return cls(z[..., :d], z[..., d:])


def _check(spec, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.dim:
        raise ShapeError(f"{spec.kind} states have {spec.dim} components, got {z.shape[-1]}")
    return z


def _positions(spec, q):
    return q.reshape(q.shape[:-1] + (spec.n_bodies, 2))


def _pairs(spec, q):
    """Yield ``(i, j, delta, dist)`` with ``delta = q_i - q_j``."""
    pos = _positions(spec, q)
    for i in range(spec.n_bodies):
        for j in range(i + 1, spec.n_bodies):
            delta = pos[..., i, :] - pos[..., j, :]
            dist = np.sqrt(np.sum(delta * delta, axis=-1))
            if np.any(dist < _MIN_SEPARATION):
                raise SingularityError(f"bodies {i} and {j} coincide")
            yield i, j, delta, dist


def _mass_vector(spec):
    return np.repeat(np.asarray(spec.masses, dtype=np.float64), 2)


def hamiltonian(spec, z):
    """Total energy ``H(z)``; vectorized over leading axes."""
    z = _check(spec, z)
    d = spec.d
    q, p = z[..., :d], z[..., d:]
    if spec.kind == "spring_mass":
        m = spec.masses[0]
        return p[..., 0] ** 2 / (2.0 * m) + 0.5 * spec.spring_k * q[..., 0] ** 2
    if spec.kind == "pendulum":
        m, ell, g = spec.masses[0], spec.length, spec.gravity
        return p[..., 0] ** 2 / (2.0 * m * ell**2) + 2.0 * m * g * ell * (1.0 - np.cos(q[..., 0]))
    kinetic = np.sum(p * p / (2.0 * _mass_vector(spec)), axis=-1)
    potential = 0.0
    for i, j, _, dist in _pairs(spec, q):
        potential = potential - spec.G * spec.masses[i] * spec.masses[j] / dist
    return kinetic + potential


def split_gradient(spec, z):
    """Return ``(dH/dq, dH/dp)`` in closed form."""
    z = _check(spec, z)
    d = spec.d
    q, p = z[..., :d], z[..., d:]
    if spec.kind == "spring_mass":
        return spec.spring_k * q, p / spec.masses[0]
    if spec.kind == "pendulum":
        m, ell, g = spec.masses[0], spec.length, spec.gravity
        return 2.0 * m * g * ell * np.sin(q), p / (m * ell**2)
    dHdp = p / _mass_vector(spec)
    dHdq = np.zeros_like(q)
    grad = _positions(spec, dHdq)
    for i, j, delta, dist in _pairs(spec, q):
        # d/dq_i of -G m_i m_j / |q_i - q_j| = G m_i m_j (q_i - q_j) / |.|^3
        f = (spec.G * spec.masses[i] * spec.masses[j] / dist**3)[..., None] * delta
        grad[..., i, :] += f
        grad[..., j, :] -= f
    return dHdq, dHdp


def true_vector_field(spec, z):
    """Hamilton's equations ``(dH/dp, -dH/dq)`` evaluated analytically."""
    dHdq, dHdp = split_gradient(spec, z)
    return np.concatenate([dHdp, -dHdq], axis=-1)


def nominal_period(spec, z0):
    """Period of the circular reference orbit the sampler starts near."""
    if spec.kind == "spring_mass":
        return 2.0 * math.pi * math.sqrt(spec.masses[0] / spec.spring_k)
    if spec.kind == "pendulum":
        return 2.0 * math.pi * math.sqrt(spec.length / spec.gravity)
    d = spec.d
    pos = _positions(spec, np.asarray(z0[:d]))
    masses = np.asarray(spec.masses)
    com = (masses[:, None] * pos).sum(0) / masses.sum()
    if spec.kind == "two_body":
        r = float(np.linalg.norm(pos[0] - pos[1]))
        return 2.0 * math.pi * math.sqrt(r**3 / (spec.G * masses.sum()))
    r = float(np.mean(np.linalg.norm(pos - com, axis=1)))
    v = math.sqrt(spec.G * float(masses.mean()) / (math.sqrt(3.0) * r))
    return 2.0 * math.pi * r / v


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    energies: np.ndarray
    z0: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.derivatives) == len(self.energies) == n):
            raise ShapeError("trajectory arrays have different lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.z0 is None:
            self.z0 = np.array(self.states[0], dtype=np.float64)

    def __len__(self):
        return len(self.times)

    @property
    def d(self):
        return self.states.shape[-1] // 2

    @property
    def q(self):
        return self.states[:, : self.d]

    @property
    def p(self):
        return self.states[:, self.d :]

    def to_json(self):
        d = self.d
        row = {
            "t": self.times.tolist(),
            "q": self.states[:, :d].tolist(),
            "p": self.states[:, d:].tolist(),
            "dq": self.derivatives[:, :d].tolist(),
            "dp": self.derivatives[:, d:].tolist(),
            "H": self.energies.tolist(),
            "z0": np.asarray(self.z0).tolist(),
        }
        return json.dumps(row, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        row = json.loads(line)
        states = np.hstack([np.asarray(row["q"], float), np.asarray(row["p"], float)])
        derivs = np.hstack([np.asarray(row["dq"], float), np.asarray(row["dp"], float)])
        z0 = np.asarray(row["z0"], float) if "z0" in row else None
        return cls(np.asarray(row["t"], float), states, derivs, np.asarray(row["H"], float), z0)


def integrate(spec, z0, times, method="rk45", rtol=1e-10, atol=1e-10, dt=1e-2):
    """Integrate the true dynamics from ``z0``, sampling at ``times``."""
    z0 = _check(spec, z0)
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if method == "rk45":
        sol = integrators.rk45(
            lambda t, z: true_vector_field(spec, z), z0, times, rtol=rtol, atol=atol
        )
    elif method == "rk4":
        sol = integrators.rk4(lambda t, z: true_vector_field(spec, z), z0, times, dt=dt)
    elif method == "leapfrog":
        d = spec.d
        if spec.n_bodies:
            inertia = _mass_vector(spec)
        elif spec.kind == "pendulum":
            inertia = spec.masses[0] * spec.length**2
        else:
            inertia = spec.masses[0]

        def dHdq(q):
            return split_gradient(spec, np.concatenate([q, np.zeros(d)]))[0]

        def dHdp(p):
            return p / inertia

        sol = integrators.leapfrog(dHdq, dHdp, z0, times, dt=dt)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    try:
        derivs = true_vector_field(spec, sol.states)
        energies = hamiltonian(spec, sol.states)
    except SingularityError as exc:
        raise IntegrationError(str(exc)) from exc
    return Trajectory(sol.times, sol.states, derivs, energies, z0=z0.copy())


@dataclass(frozen=True)
class SamplerRules:
    """Initial-condition ranges for one benchmark."""

    energy_range: tuple = (0.2, 1.0)
    radius_range: tuple = (0.9, 1.2)
    speed_factor_range: tuple = (1.0, 1.0)
    angle_jitter: float = 0.0

    def to_dict(self):
        return {
            "energy_range": list(self.energy_range),
            "radius_range": list(self.radius_range),
            "speed_factor_range": list(self.speed_factor_range),
            "angle_jitter": self.angle_jitter,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            tuple(data["energy_range"]),
            tuple(data["radius_range"]),
            tuple(data["speed_factor_range"]),
            data["angle_jitter"],
        )


def _rot(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def sample_initial_conditions(spec, rng, rules):
    """Draw one initial state ``z0`` according to ``rules``.

    spring_mass: total energy uniform in ``energy_range``, uniform phase.
    pendulum: phase-space radius ``sqrt(q^2 + p^2)`` uniform in
    ``radius_range``, uniform phase (all such states librate).
    two_body: orbit radius uniform in ``radius_range`` (separation twice
    that), circular speed scaled by a factor from ``speed_factor_range``;
    zero total momentum.
    three_body: equilateral placement on a circle of radius in
    ``radius_range`` with circular speeds, each velocity scaled and rotated
    by small random amounts; total momentum removed.
    """
    if spec.kind == "spring_mass":
        m, k = spec.masses[0], spec.spring_k
        energy = rng.uniform(*rules.energy_range)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([np.sqrt(2.0 * energy / k) * np.cos(phase), np.sqrt(2.0 * m * energy) * np.sin(phase)])
    if spec.kind == "pendulum":
        r = rng.uniform(*rules.radius_range)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([r * np.cos(phase), r * np.sin(phase)])

    masses = np.asarray(spec.masses, dtype=np.float64)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    if spec.kind == "two_body":
        r = 2.0 * rng.uniform(*rules.radius_range)
        m1, m2 = masses
        total = m1 + m2
        u = np.array([np.cos(theta), np.sin(theta)])
        pos = np.stack([u * r * m2 / total, -u * r * m1 / total])
        # relative circular speed sqrt(G M / r), shared in inverse mass ratio
        v_rel = np.sqrt(spec.G * total / r) * rng.uniform(*rules.speed_factor_range)
        perp = np.array([-u[1], u[0]])
        vel = np.stack([perp * v_rel * m2 / total, -perp * v_rel * m1 / total])
    else:
        r = rng.uniform(*rules.radius_range)
        angles = theta + 2.0 * np.pi * np.arange(3) / 3.0
        pos = r * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        v = np.sqrt(spec.G * masses.mean() / (np.sqrt(3.0) * r))
        vel = np.empty((3, 2))
        for i, a in enumerate(angles):
            tangent = v * np.array([-np.sin(a), np.cos(a)])
            scale = rng.uniform(*rules.speed_factor_range)
            jitter = rng.uniform(-rules.angle_jitter, rules.angle_jitter)
            vel[i] = scale * _rot(tangent, jitter)
    mom = masses[:, None] * vel
    mom -= mom.sum(0) / len(masses)
    return np.concatenate([pos.ravel(), mom.ravel()])


def add_noise(traj, sigma2, rng):
    """Add i.i.d. ``Normal(0, sigma2)`` to every stored state and derivative."""
    if sigma2 < 0:
        raise ValueError("noise variance must be nonnegative")
    if sigma2 == 0:
        return Trajectory(traj.times.copy(), traj.states.copy(), traj.derivatives.copy(),
                          traj.energies.copy(), traj.z0.copy())
    sd = math.sqrt(sigma2)
    states = traj.states + rng.normal(0.0, sd, traj.states.shape)
    derivs = traj.derivatives + rng.normal(0.0, sd, traj.derivatives.shape)
    return Trajectory(traj.times.copy(), states, derivs, traj.energies.copy(), traj.z0.copy())


@dataclass
class Dataset:
    system: SystemSpec
    train: list
    test: list
    sigma2: float
    seed: int
    preset: str = ""
    meta: dict = field(default_factory=dict)

    def stack(self, split="train"):
        """All samples of a split as ``(states, derivatives)`` arrays."""
        trajs = self.train if split == "train" else self.test
        return (np.concatenate([t.states for t in trajs]), np.concatenate([t.derivatives for t in trajs]))


def _generate_one(spec, rules, n_samples, span_periods, span, child, max_tries=50):
    rng = np.random.default_rng(child)
    for _ in range(max_tries):
        z0 = sample_initial_conditions(spec, rng, rules)
        t_end = span if span_periods is None else span_periods * nominal_period(spec, z0)
        times = np.linspace(0.0, t_end, n_samples)
        try:
            traj = integrate(spec, z0, times)
        except IntegrationError:
            continue
        if spec.n_bodies:
            pos = _positions(spec, traj.q)
            close = min(
                np.min(np.linalg.norm(pos[:, i] - pos[:, j], axis=-1))
                for i in range(spec.n_bodies) for j in range(i + 1, spec.n_bodies)
            )
            if close < 0.1:
                continue
        drift = np.max(np.abs(traj.energies - traj.energies[0])) / max(1.0, abs(traj.energies[0]))
        if drift > 1e-6:
            continue
        return traj, rng
    raise IntegrationError(f"no well-behaved {spec.kind} trajectory after {max_tries} draws")


def build_dataset(preset, seed=0, clean=False, n_trajectories=None):
    """Generate the train/test trajectories described by ``preset``.

    ``preset`` is a :class:`sympkan.presets.ExperimentPreset`.  Each trajectory
    gets its own child seed, so the result depends only on ``(preset, seed)``.
    """
    spec = preset.system
    n_total = preset.n_train + preset.n_test if n_trajectories is None else int(n_trajectories)
    n_train = preset.n_train if n_trajectories is None else int(round(n_total * preset.train_fraction))
    sigma2 = 0.0 if clean else preset.sigma2
    children = np.random.SeedSequence(seed).spawn(n_total)
    trajs = []
    for child in children:
        traj, rng = _generate_one(spec, preset.rules, preset.n_samples, preset.span_periods, preset.span, child)
        trajs.append(add_noise(traj, sigma2, rng))
    meta = {
        "preset": preset.name,
        "system": spec.to_dict(),
        "seed": int(seed),
        "sigma2": sigma2,
        "split": {"train": n_train, "test": n_total - n_train},
        "n_samples": preset.n_samples,
        "span": preset.span,
        "span_periods": preset.span_periods,
        "rules": preset.rules.to_dict(),
    }
    return Dataset(spec, trajs[:n_train], trajs[n_train:], sigma2, int(seed), preset.name, meta)


def write_dataset(dataset, out_dir):
    """Write ``<preset>.jsonl`` (train lines, then test) and ``<preset>.meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = dataset.preset or dataset.system.kind
    data_path = out_dir / f"{stem}.jsonl"
    meta_path = out_dir / f"{stem}.meta.json"
    with open(data_path, "w", encoding="utf-8") as fh:
        for traj in dataset.train + dataset.test:
            fh.write(traj.to_json() + "\n")
    meta = dict(dataset.meta)
    meta.update({"data_file": data_path.name, "split": {"train": len(dataset.train), "test": len(dataset.test)}})
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data_path, meta_path


def read_dataset(path):
    """Load a dataset from its ``.jsonl`` file, its ``.meta.json`` or their directory."""
    path = Path(path)
    if path.is_dir():
        metas = sorted(path.glob("*.meta.json"))
        if len(metas) != 1:
            raise FileNotFoundError(f"expected exactly one *.meta.json in {path}, found {len(metas)}")
        path = metas[0]
    if path.name.endswith(".jsonl"):
        path = path.with_name(path.name[: -len(".jsonl")] + ".meta.json")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad dataset metadata {path}: {exc.msg}", exc.pos) from exc
    data_path = path.with_name(meta["data_file"])
    trajs = []
    with open(data_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    trajs.append(Trajectory.from_json(line))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise FormatError(f"{data_path}:{lineno}: malformed trajectory ({exc})") from exc
    n_train = meta["split"]["train"]
    if len(trajs) != n_train + meta["split"]["test"]:
        raise FormatError(f"{data_path}: expected {n_train + meta['split']['test']} trajectories, found {len(trajs)}")
    spec = SystemSpec.from_dict(meta["system"])
    return Dataset(spec, trajs[:n_train], trajs[n_train:], meta["sigma2"], meta["seed"], meta["preset"], meta)
