import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sympkan import systems
from sympkan.models import BaselineNet, KarHamiltonian, MlpHamiltonian

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SPECS = {
    "spring_mass": systems.SystemSpec.spring_mass(),
    "pendulum": systems.SystemSpec.pendulum(),
    "two_body": systems.SystemSpec.two_body(),
    "three_body": systems.SystemSpec.three_body(),
}


def random_state(spec, rng):
    """A generic nonsingular state of ``spec``."""
    if spec.n_bodies:
        rules = systems.SamplerRules(radius_range=(0.8, 1.2), speed_factor_range=(0.8, 1.2), angle_jitter=0.1)
        return systems.sample_initial_conditions(spec, rng, rules) + rng.normal(0.0, 0.05, spec.dim)
    return rng.uniform(-1.5, 1.5, spec.dim)


def small_models(dim, rng, states):
    """One small model of each family for ``dim``-dimensional phase space."""
    return {
        "baseline": BaselineNet(dim, (8, 8), rng),
        "hnn": MlpHamiltonian(dim, (8, 8), rng),
        "kar": KarHamiltonian.initialize([dim, 3, 1], 2, 3, states, rng),
    }


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
