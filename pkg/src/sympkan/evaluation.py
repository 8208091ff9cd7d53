"""Metrics, rollouts and table reproduction."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import integrators, systems
from .errors import DivergenceError, SingularityError, UsageError
from .models import load_model, save_model
from .presets import MODEL_KINDS
from .systems import SystemSpec, Trajectory
from .training import train

__all__ = [
    "MetricReport",
    "Rollout",
    "derivative_mse",
    "energy_drift",
    "evaluate_model",
    "reproduce_table",
    "rollout",
    "write_plot_data",
    "write_report_csv",
]

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "train_mean", "train_std", "test_mean", "test_std", "energy_mean", "energy_std", "scale"]


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std())


def derivative_mse(model, trajectories):
    """Per-trajectory mean of ``|predicted dz/dt - stored dz/dt|^2``.

    Returns ``(mean, std, per_trajectory)`` over the trajectories.
    """
    if len(trajectories) == 0:
        raise UsageError("no trajectories to evaluate")
    per = []
    for traj in trajectories:
        r = model.field(traj.states) - traj.derivatives
        per.append(float(np.mean(np.sum(r * r, axis=-1))))
    mean, std = _mean_std(per)
    return mean, std, per


@dataclass
class Rollout:
    trajectory: Trajectory
    diverged: bool = False
    message: str = ""
    learned_energies: np.ndarray | None = None


def _field_fn(source):
    if isinstance(source, SystemSpec):
        spec = source
        return lambda t, z: systems.true_vector_field(spec, z)
    return lambda t, z: source.field(z)


def _true_energy(spec, states):
    """True energies, cut at the first singular state."""
    energies = []
    for z in states:
        try:
            energies.append(float(systems.hamiltonian(spec, z)))
        except SingularityError:
            break
    return np.asarray(energies)


def rollout(source, spec, z0, times, rtol=1e-9, atol=1e-9, bound=None, max_steps=50_000):
    """Integrate ``source``'s field from ``z0`` with rk45 at ``times``.

    ``source`` is a model (HNN/KAR through ``J dH/dz``, baseline through its
    output) or a :class:`SystemSpec`.  Energies in the returned trajectory are
    those of the true system ``spec``.  A blow-up truncates the rollout and
    sets ``diverged``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if bound is None:
        bound = 100.0 * max(1.0, float(np.max(np.abs(z0))))
    sol = integrators.rk45(_field_fn(source), z0, times, rtol=rtol, atol=atol, bound=bound,
                           max_steps=max_steps, on_failure="truncate")
    states = sol.states
    energies = _true_energy(spec, states)
    diverged = sol.diverged
    if len(energies) < len(states):
        states = states[: len(energies)]
        diverged = True
    derivs = np.stack([_field_fn(source)(0.0, z) for z in states]) if len(states) else np.zeros((0, z0.size))
    learned = None
    if not isinstance(source, SystemSpec) and getattr(source, "hamiltonian", False):
        learned = source.energy(states)
    traj = Trajectory(sol.times[: len(states)], states, derivs, energies, z0=z0)
    return Rollout(traj, diverged, sol.message, learned)


def _drift_times(preset, spec, z0):
    if preset is not None and preset.horizon_periods is not None:
        horizon = preset.horizon_periods * systems.nominal_period(spec, z0)
    else:
        horizon = 20.0 if preset is None or preset.horizon is None else preset.horizon
    n = 200 if preset is None else preset.drift_samples
    return np.linspace(0.0, horizon, n)


def energy_drift(source, spec, initials, times=None, preset=None, rtol=1e-9, atol=1e-9):
    """Time-averaged squared deviation of the true energy along rollouts.

    For each initial state the field of ``source`` is integrated; the true
    Hamiltonian ``H`` is evaluated at every output time and
    ``mean_t (H(z(t)) - H(z0))^2`` is recorded.  A diverged rollout keeps its
    last reachable energy for the remaining times.  Returns
    ``(mean, std, per_initial, n_diverged)``.
    """
    if len(initials) == 0:
        raise UsageError("no initial states for the energy drift")
    per = []
    n_div = 0
    for z0 in initials:
        t = times if times is not None else _drift_times(preset, spec, z0)
        ro = rollout(source, spec, z0, t, rtol=rtol, atol=atol)
        e = ro.trajectory.energies
        if ro.diverged:
            n_div += 1
            if len(e) == 0:
                continue
            e = np.concatenate([e, np.full(len(t) - len(e), e[-1])])
        h0 = float(systems.hamiltonian(spec, z0))
        per.append(float(np.mean((e - h0) ** 2)))
    partial = (*_mean_std(per), per, n_div) if per else None
    if n_div == len(initials):
        raise DivergenceError(f"all {len(initials)} rollouts diverged", partial)
    return partial


@dataclass
class MetricReport:
    model: str
    train_mean: float
    train_std: float
    test_mean: float
    test_std: float
    energy_mean: float
    energy_std: float
    scale: int
    std_over: str = "trajectories"
    n_repeats: int = 1
    n_diverged: int = 0
    per_trajectory: dict = field(default_factory=dict)

    def scaled_row(self):
        f = 10.0**self.scale
        return {
            "model": self.model,
            "train_mean": self.train_mean * f,
            "train_std": self.train_std * f,
            "test_mean": self.test_mean * f,
            "test_std": self.test_std * f,
            "energy_mean": self.energy_mean * f,
            "energy_std": self.energy_std * f,
            "scale": self.scale,
        }


def _drift_initials(dataset, preset):
    initials = [t.z0 for t in dataset.test]
    if preset is not None and preset.n_drift is not None:
        initials = initials[: preset.n_drift]
    return initials


def evaluate_model(model, dataset, preset=None, name=None):
    """Train/test derivative MSE and energy drift of one model."""
    scale = 3 if preset is None else preset.scale
    tr_mean, tr_std, tr_per = derivative_mse(model, dataset.train)
    te_mean, te_std, te_per = derivative_mse(model, dataset.test)
    try:
        e_mean, e_std, e_per, n_div = energy_drift(model, dataset.system, _drift_initials(dataset, preset),
                                                   preset=preset)
    except DivergenceError as exc:
        if exc.partial is None:
            raise
        # report the padded drift; n_diverged tells the reader every rollout blew up
        log.warning("%s: %s", name or model.kind, exc)
        e_mean, e_std, e_per, n_div = exc.partial
    return MetricReport(
        name or model.kind, tr_mean, tr_std, te_mean, te_std, e_mean, e_std, scale,
        n_diverged=n_div, per_trajectory={"train": tr_per, "test": te_per, "energy": e_per},
    )


def combine_reports(reports):
    """Aggregate one model's reports over seeds: mean and std of the seed means."""
    if len(reports) == 1:
        return reports[0]
    first = reports[0]

    def agg(attr):
        return _mean_std([getattr(r, attr) for r in reports])

    (trm, trs), (tem, tes), (em, es) = agg("train_mean"), agg("test_mean"), agg("energy_mean")
    return MetricReport(first.model, trm, trs, tem, tes, em, es, first.scale, std_over="seeds",
                        n_repeats=len(reports), n_diverged=sum(r.n_diverged for r in reports),
                        per_trajectory={"seeds": [r.per_trajectory for r in reports],
                                        "seed_means": {a: [getattr(r, f"{a}_mean") for r in reports]
                                                       for a in ("train", "test", "energy")}})


def write_report_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.scaled_row().items()})


def write_plot_data(models, dataset, out_dir, preset=None, index=0):
    """Energy-vs-time and trajectory-trace series for one test initial state.

    ``models`` maps a column name (``baseline``, ``hnn``, ``kar``) to a model.
    Writes ``energy.csv`` with ``t,H_true,H_<name>...`` and one
    ``trace_<source>.csv`` per source with ``t,x_i,y_i`` per body (``t,q,p``
    for one-degree-of-freedom systems).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = dataset.system
    z0 = dataset.test[index].z0
    times = _drift_times(preset, spec, z0)
    sources = {"true": spec, **models}
    series = {name: rollout(src, spec, z0, times).trajectory for name, src in sources.items()}
    paths = []
    energy_path = out_dir / "energy.csv"
    with open(energy_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"H_{name}" for name in sources])
        for i, t in enumerate(times):
            row = [repr(float(t))]
            for name in sources:
                e = series[name].energies
                row.append(repr(float(e[i])) if i < len(e) else "")
            w.writerow(row)
    paths.append(energy_path)
    for name, traj in series.items():
        path = out_dir / f"trace_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if spec.n_bodies:
                header = ["t"] + [c for i in range(spec.n_bodies) for c in (f"x_{i}", f"y_{i}")]
                cols = traj.q
            else:
                header, cols = ["t", "q", "p"], traj.states
            w.writerow(header)
            for t, row in zip(traj.times, cols):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        paths.append(path)
    return paths


def reproduce_table(preset, n_repeats=1, seed=0, out_dir=None, models=MODEL_KINDS, dataset_factory=None):
    """Train and evaluate every model family ``n_repeats`` times.

    Repeat ``i`` uses dataset and training seed ``seed + i``.  When
    ``out_dir`` is given, trained models and histories are stored under
    ``runs/`` and reused on a rerun, and the table CSV and plot data are
    written.  Returns one aggregated :class:`MetricReport` per family.
    """
    from .systems import build_dataset

    out_dir = Path(out_dir) if out_dir is not None else None
    per_model = {kind: [] for kind in models}
    last_models, last_ds = {}, None
    for rep in range(n_repeats):
        run_seed = seed + rep
        ds = build_dataset(preset, seed=run_seed) if dataset_factory is None else dataset_factory(run_seed)
        last_ds = ds
        for kind in models:
            cfg = preset.config(kind, seed=run_seed)
            model = None
            if out_dir is not None:
                run_dir = out_dir / "runs" / preset.name
                run_dir.mkdir(parents=True, exist_ok=True)
                model_path = run_dir / f"{kind}_seed{run_seed}.khm"
                if model_path.exists() and (run_dir / f"{kind}_seed{run_seed}.done").exists():
                    model = load_model(model_path)
                    log.info("reusing %s", model_path)
            if model is None:
                model, history = train(cfg, ds)
                if out_dir is not None:
                    save_model(model, model_path)
                    history.write_csv(run_dir / f"{kind}_seed{run_seed}.history.csv")
                    (run_dir / f"{kind}_seed{run_seed}.done").write_text("ok\n")
            report = evaluate_model(model, ds, preset, name=kind)
            per_model[kind].append(report)
            last_models[kind] = model
    reports = [combine_reports(per_model[kind]) for kind in models]
    if out_dir is not None:
        write_report_csv(reports, out_dir / f"{preset.name}_table.csv")
        write_plot_data(last_models, last_ds, out_dir / f"{preset.name}_plots", preset)
        summary = {r.model: r.scaled_row() | {"std_over": r.std_over, "n_diverged": r.n_diverged} for r in reports}
        summary["horizon"] = {"seconds": preset.horizon, "nominal_periods": preset.horizon_periods,
                              "samples": preset.drift_samples}
        (out_dir / f"{preset.name}_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    return reports

