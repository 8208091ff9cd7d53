import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sympkan import integrators, systems
from sympkan.errors import IntegrationError, ShapeError, SingularityError
from sympkan.presets import get_preset, scaled
from sympkan.systems import SamplerRules, SystemSpec, Trajectory

from conftest import SPECS, central_difference, random_state


def test_spring_energy_at_rest():
    assert systems.hamiltonian(SPECS["spring_mass"], [0.0, 0.0]) == 0.0


def test_pendulum_energy_at_top():
    assert systems.hamiltonian(SPECS["pendulum"], [math.pi, 0.0]) == pytest.approx(6.0, abs=1e-14)


def test_two_body_energy_unit_separation():
    z = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert systems.hamiltonian(SPECS["two_body"], z) == pytest.approx(-1.0, abs=1e-15)


def test_coincident_bodies_raise():
    z = np.zeros(8)
    with pytest.raises(SingularityError):
        systems.hamiltonian(SPECS["two_body"], z)


def test_wrong_dimension_raises():
    with pytest.raises(ShapeError):
        systems.hamiltonian(SPECS["three_body"], np.ones(8))


def test_spring_field():
    np.testing.assert_array_equal(systems.true_vector_field(SPECS["spring_mass"], [1.0, 0.0]), [0.0, -1.0])


@given(p=st.floats(-3, 3))
def test_pendulum_field_at_bottom(p):
    f = systems.true_vector_field(SPECS["pendulum"], [0.0, p])
    assert f[0] == pytest.approx(2.0 * p, abs=1e-15)
    assert f[1] == 0.0


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_field_matches_finite_difference_of_energy(kind):
    spec = SPECS[kind]
    rng = np.random.default_rng(7)
    d = spec.d
    worst = 0.0
    n = 1000 if spec.n_bodies == 0 else 200
    for _ in range(n):
        z = random_state(spec, rng)
        grad = central_difference(lambda x: systems.hamiltonian(spec, x), z, h=1e-5)
        expected = np.concatenate([grad[d:], -grad[:d]])
        worst = max(worst, np.max(np.abs(systems.true_vector_field(spec, z) - expected)))
    assert worst <= 1e-8


def test_spring_closed_form():
    traj = systems.integrate(SPECS["spring_mass"], [1.0, 0.0], [0.0, math.pi / 2])
    np.testing.assert_allclose(traj.states[-1], [0.0, -1.0], atol=1e-6)


def test_zero_length_span():
    traj = systems.integrate(SPECS["spring_mass"], [0.3, 0.4], [0.0])
    assert len(traj) == 1
    np.testing.assert_array_equal(traj.states[0], [0.3, 0.4])


def test_rk4_spring():
    traj = systems.integrate(SPECS["spring_mass"], [1.0, 0.0], np.linspace(0, 2 * math.pi, 5), method="rk4")
    np.testing.assert_allclose(traj.states[-1], [1.0, 0.0], atol=1e-8)


def test_leapfrog_bounded_energy_error():
    times = np.arange(1001) * 0.1
    traj = systems.integrate(SPECS["spring_mass"], [1.0, 0.0], times, method="leapfrog", dt=0.1)
    err = np.abs(traj.energies - 0.5)
    # Stormer-Verlet on the unit oscillator: |dH| <= h^2/8 from (1, 0)
    assert err.max() <= 0.1**2 / 8 + 1e-12
    # no secular growth: the last stretch is no worse than the first
    assert err[-200:].max() <= err[:200].max() * 1.01


def test_leapfrog_n_body():
    spec = SPECS["two_body"]
    z0 = systems.sample_initial_conditions(spec, np.random.default_rng(0), SamplerRules(radius_range=(1, 1)))
    traj = systems.integrate(spec, z0, np.linspace(0, 5, 11), method="leapfrog", dt=1e-3)
    assert np.max(np.abs(traj.energies - traj.energies[0])) < 1e-5


def test_integrate_rejects_unknown_method():
    with pytest.raises(ValueError):
        systems.integrate(SPECS["spring_mass"], [1.0, 0.0], [0.0, 1.0], method="euler")


def test_singularity_passage_reports_time():
    spec = SPECS["two_body"]
    z0 = np.array([-0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0])  # head-on collapse
    with pytest.raises(IntegrationError) as info:
        systems.integrate(spec, z0, np.linspace(0.0, 2.0, 5))
    assert info.value.last_time is not None


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_clean_trajectory_energy_conserved(kind):
    spec = SPECS[kind]
    rules = SamplerRules(radius_range=(0.9, 1.2), speed_factor_range=(0.9, 1.1), angle_jitter=0.05)
    if kind == "pendulum":
        rules = SamplerRules(radius_range=(1.3, 2.3))
    rng = np.random.default_rng(11)
    for _ in range(3):
        z0 = systems.sample_initial_conditions(spec, rng, rules)
        t_end = 3.0 if spec.n_bodies == 0 else systems.nominal_period(spec, z0)
        traj = systems.integrate(spec, z0, np.linspace(0.0, t_end, 40))
        rel = np.max(np.abs(traj.energies - traj.energies[0])) / max(1.0, abs(traj.energies[0]))
        assert rel <= 1e-6


@pytest.mark.parametrize("kind", ["two_body", "three_body"])
def test_linear_momentum_conserved(kind):
    spec = SPECS[kind]
    z0 = systems.sample_initial_conditions(spec, np.random.default_rng(3),
                                           SamplerRules(radius_range=(1.0, 1.1), angle_jitter=0.1))
    traj = systems.integrate(spec, z0, np.linspace(0, 2 * systems.nominal_period(spec, z0), 50))
    total = traj.p.reshape(len(traj), spec.n_bodies, 2).sum(axis=1)
    assert np.max(np.abs(total - total[0])) <= 1e-8


def test_spring_sampler_energy_range():
    spec = SPECS["spring_mass"]
    rng = np.random.default_rng(0)
    energies = [systems.hamiltonian(spec, systems.sample_initial_conditions(spec, rng, SamplerRules()))
                for _ in range(10_000)]
    assert 0.2 - 1e-12 <= min(energies) and max(energies) <= 1.0 + 1e-12


def test_three_body_sampler_separation():
    spec = SPECS["three_body"]
    rules = get_preset("three_body").rules
    rng = np.random.default_rng(0)
    for _ in range(2000):
        z = systems.sample_initial_conditions(spec, rng, rules)
        pos = z[:6].reshape(3, 2)
        dists = [np.linalg.norm(pos[i] - pos[j]) for i in range(3) for j in range(i + 1, 3)]
        assert min(dists) > 0.1


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_sampler_deterministic(kind):
    spec = SPECS[kind]
    a = systems.sample_initial_conditions(spec, np.random.default_rng(5), SamplerRules())
    b = systems.sample_initial_conditions(spec, np.random.default_rng(5), SamplerRules())
    np.testing.assert_array_equal(a, b)


def _clean_traj():
    return systems.integrate(SPECS["spring_mass"], [1.0, 0.0], np.linspace(0, 3, 30))


def test_noise_zero_is_identity():
    traj = _clean_traj()
    out = systems.add_noise(traj, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.states, traj.states)
    np.testing.assert_array_equal(out.derivatives, traj.derivatives)


def test_noise_variance():
    n = 500_000
    traj = Trajectory(np.arange(n, dtype=float), np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n))
    out = systems.add_noise(traj, 0.1, np.random.default_rng(1))
    samples = np.concatenate([out.states.ravel(), out.derivatives.ravel()])
    assert samples.size == 2 * 10**6
    assert abs(samples.var() / 0.1 - 1.0) <= 0.02
    np.testing.assert_array_equal(out.energies, traj.energies)
    np.testing.assert_array_equal(out.times, traj.times)


def test_noise_seed_deterministic():
    traj = _clean_traj()
    a = systems.add_noise(traj, 0.1, np.random.default_rng(9))
    b = systems.add_noise(traj, 0.1, np.random.default_rng(9))
    np.testing.assert_array_equal(a.states, b.states)


def test_trajectory_json_round_trip_is_exact():
    traj = systems.add_noise(_clean_traj(), 0.1, np.random.default_rng(2))
    back = Trajectory.from_json(traj.to_json())
    for name in ("times", "states", "derivatives", "energies", "z0"):
        np.testing.assert_array_equal(getattr(back, name), getattr(traj, name))


def test_trajectory_rejects_unsorted_times():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2))


def test_spring_preset_sizes():
    ds = systems.build_dataset(get_preset("spring"), seed=0)
    assert len(ds.train) == 25 and len(ds.test) == 25
    assert all(len(t) == 30 for t in ds.train + ds.test)
    assert ds.sigma2 == pytest.approx(0.01, rel=1e-15)


def test_preset_tables():
    two, three = get_preset("two_body"), get_preset("three_body")
    assert (two.n_train, two.n_test, two.n_samples, two.noise_std) == (800, 200, 50, 0.05)
    assert (three.n_trajectories, three.n_samples, three.noise_std) == (5000, 20, 0.2)
    assert get_preset("pendulum").n_samples == 45


def test_reduced_two_body_dataset():
    preset = scaled(get_preset("two_body"), trajectories=10)
    ds = systems.build_dataset(preset, seed=1)
    assert (len(ds.train), len(ds.test)) == (8, 2)
    for traj in ds.train:
        assert traj.states.shape == (50, 8)


def test_clean_dataset_has_exact_derivatives():
    ds = systems.build_dataset(get_preset("pendulum"), seed=0, clean=True)
    traj = ds.train[0]
    np.testing.assert_allclose(traj.derivatives, systems.true_vector_field(ds.system, traj.states), atol=1e-15)


def test_dataset_files_byte_identical(tmp_path):
    preset = get_preset("spring")
    paths = []
    for name in ("a", "b"):
        ds = systems.build_dataset(preset, seed=4)
        paths.append(systems.write_dataset(ds, tmp_path / name))
    for p, q in zip(*paths):
        assert p.read_bytes() == q.read_bytes()


def test_dataset_round_trip(tmp_path):
    ds = systems.build_dataset(scaled(get_preset("three_body"), trajectories=5), seed=2)
    data_path, meta_path = systems.write_dataset(ds, tmp_path)
    for path in (data_path, meta_path, tmp_path):
        back = systems.read_dataset(path)
        assert back.system == ds.system
        assert len(back.train) == len(ds.train)
        np.testing.assert_array_equal(back.test[0].states, ds.test[0].states)


def test_system_spec_round_trip():
    for spec in SPECS.values():
        assert SystemSpec.from_dict(spec.to_dict()) == spec


def test_rk45_truncates_on_blow_up():
    sol = integrators.rk45(lambda t, z: z * z, np.array([1.0]), np.linspace(0, 2, 21),
                           bound=1e3, on_failure="truncate")
    assert sol.diverged
    assert sol.times[-1] < 1.0


def test_rk45_raises_by_default():
    with pytest.raises(IntegrationError):
        integrators.rk45(lambda t, z: z * z, np.array([1.0]), np.linspace(0, 2, 21), bound=1e3)
