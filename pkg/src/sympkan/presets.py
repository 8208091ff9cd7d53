"""Benchmark experiment presets.

Each preset fixes the system constants, dataset sizes, noise level, model
hyperparameters, metric scale and rollout horizon of one benchmark, so a
full reproduction needs no flags.  :func:`scaled` shrinks a preset for desk
runs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace

from .systems import SamplerRules, SystemSpec
from .training import TrainConfig

__all__ = ["PRESETS", "ExperimentPreset", "get_preset", "scaled"]

MODEL_KINDS = ("baseline", "hnn", "kar")


@dataclass
class ExperimentPreset:
    name: str
    system: SystemSpec
    n_train: int
    n_test: int
    n_samples: int
    noise_std: float
    rules: SamplerRules
    configs: dict
    scale: int
    span: float | None = None
    span_periods: float | None = None
    horizon: float | None = None
    horizon_periods: float | None = None
    drift_samples: int = 200
    n_drift: int | None = None
    train_fraction: float = field(default=0.5)

    @property
    def sigma2(self):
        """Noise variance; the preset stores the standard deviation."""
        return self.noise_std**2

    @property
    def n_trajectories(self):
        return self.n_train + self.n_test

    def config(self, model, seed=0, steps=None):
        cfg = replace(self.configs[model], seed=int(seed))
        if steps is not None:
            cfg = replace(cfg, steps=int(steps))
        return cfg

    def to_dict(self):
        out = asdict(self)
        out["sigma2"] = self.sigma2
        out["system"] = self.system.to_dict()
        out["rules"] = self.rules.to_dict()
        out["configs"] = {k: asdict(v) for k, v in self.configs.items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop("sigma2", None)
        data["system"] = SystemSpec.from_dict(data["system"])
        data["rules"] = SamplerRules.from_dict(data["rules"])
        data["configs"] = {k: TrainConfig(**v) for k, v in data["configs"].items()}
        return cls(**data)


def _mlp(steps, batch_size):
    return TrainConfig("hnn", {"hidden": [200, 200]}, "adam", lr=1e-3, weight_decay=1e-4,
                       steps=steps, batch_size=batch_size)


def _configs(mlp_steps, mlp_batch, kar_hidden, G, k, kar_steps, kar_batch=50, kar_inner=1, grid_updates=False):
    hnn = _mlp(mlp_steps, mlp_batch)
    return {
        "baseline": replace(hnn, model="baseline"),
        "hnn": hnn,
        "kar": TrainConfig("kar", {"hidden": list(kar_hidden), "G": G, "k": k}, "lbfgs",
                           lr=1.0, steps=kar_steps, batch_size=kar_batch, inner_iters=kar_inner,
                           grid_update_every=5 if grid_updates else 0, grid_update_until=50 if grid_updates else 0),
    }


PRESETS = {
    "spring": ExperimentPreset(
        name="spring",
        system=SystemSpec.spring_mass(m=1.0, k=1.0),
        n_train=25,
        n_test=25,
        n_samples=30,
        noise_std=0.1,
        rules=SamplerRules(energy_range=(0.2, 1.0)),
        configs=_configs(2000, None, [2], G=2, k=5, kar_steps=200, kar_batch=None, kar_inner=5),
        scale=3,
        span=3.0,
        horizon=20.0,
    ),
    "pendulum": ExperimentPreset(
        name="pendulum",
        system=SystemSpec.pendulum(m=0.5, length=1.0, g=3.0),
        n_train=25,
        n_test=25,
        n_samples=45,
        noise_std=0.1,
        rules=SamplerRules(radius_range=(1.3, 2.3)),
        configs=_configs(2000, None, [2], G=2, k=3, kar_steps=200, kar_batch=None, kar_inner=5),
        scale=3,
        span=3.0,
        horizon=20.0,
    ),
    "two_body": ExperimentPreset(
        name="two_body",
        system=SystemSpec.two_body(m1=1.0, m2=1.0, G=1.0),
        n_train=800,
        n_test=200,
        n_samples=50,
        noise_std=0.05,
        rules=SamplerRules(radius_range=(0.5, 1.5), speed_factor_range=(0.8, 1.2)),
        configs=_configs(10000, 600, [10, 10], G=3, k=3, kar_steps=4000, grid_updates=True),
        scale=6,
        span_periods=1.0,
        horizon_periods=3.0,
        n_drift=50,
        train_fraction=0.8,
    ),
    "three_body": ExperimentPreset(
        name="three_body",
        system=SystemSpec.three_body(masses=(1.0, 1.0, 1.0), G=1.0),
        n_train=4000,
        n_test=1000,
        n_samples=20,
        noise_std=0.2,
        rules=SamplerRules(radius_range=(0.9, 1.2), speed_factor_range=(0.9, 1.1), angle_jitter=0.1),
        configs=_configs(10000, 600, [15, 10], G=2, k=3, kar_steps=200, grid_updates=True),
        scale=3,
        span_periods=0.5,
        horizon_periods=3.0,
        n_drift=50,
        train_fraction=0.8,
    ),
}


def get_preset(name):
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def scaled(preset, trajectories=None, step_factor=None, steps=None):
    """Copy of ``preset`` with fewer trajectories and/or optimizer steps."""
    out = copy.deepcopy(preset)
    if trajectories is not None:
        n_train = int(round(trajectories * out.train_fraction))
        out.n_train, out.n_test = n_train, int(trajectories) - n_train
    for kind, cfg in out.configs.items():
        if steps is not None:
            out.configs[kind] = replace(cfg, steps=int(steps))
        elif step_factor is not None:
            out.configs[kind] = replace(cfg, steps=max(1, int(round(cfg.steps * step_factor))))
    return out
