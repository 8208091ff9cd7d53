import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sympkan import diffcore as dc
from sympkan import spline, systems
from sympkan.errors import FormatError, ModelKindError, ShapeError
from sympkan.models import (
    BaselineNet,
    KarHamiltonian,
    MlpHamiltonian,
    TrueSystem,
    baseline_forward,
    deserialize_model,
    eval_hamiltonian,
    grad_wrt_inputs,
    serialize_model,
    symplectic_matrix,
    symplectic_vector_field,
)
from sympkan.training import TrainConfig, train

from conftest import SPECS, central_difference, random_state, small_models


@pytest.mark.parametrize("d", [1, 2, 4, 6])
def test_symplectic_matrix(d):
    J = symplectic_matrix(d)
    np.testing.assert_array_equal(J @ J, -np.eye(2 * d))
    np.testing.assert_array_equal(J.T, -J)


def _quadratic_kar():
    """Single-layer KAR fitted to H = (q^2 + p^2) / 2 on [-1, 1]^2."""
    G, k = 4, 3
    model = KarHamiltonian([2, 1], G, k, [[(-1.0, 1.0), (-1.0, 1.0)]])
    grid = spline.SplineGrid(-1.0, 1.0, G, k)
    x = np.linspace(-1.0, 1.0, 101)
    c = spline.fit_coefficients(grid, x, 0.5 * x * x)
    model.store.set_flat(np.concatenate([np.stack([c, c])[:, None, :].ravel(), np.zeros(2), np.ones(2)]))
    return model


def test_zero_kar_is_zero():
    rng = np.random.default_rng(0)
    model = KarHamiltonian.initialize([2, 3, 1], 2, 3, rng.normal(size=(20, 2)), rng)
    theta = model.store.theta.copy()
    theta[model.store.slices()["coef0"]] = 0.0
    theta[model.store.slices()["coef1"]] = 0.0
    theta[model.store.slices()["ws0"]] = 0.0
    theta[model.store.slices()["ws1"]] = 0.0
    theta[model.store.slices()["wb1"]] = 0.0
    model.store.set_flat(theta)
    z = rng.normal(size=(9, 2)) * 3
    assert np.all(dc.forward(eval_hamiltonian(model, z)) == 0.0)


def test_kar_fits_quadratic():
    model = _quadratic_kar()
    z = np.random.default_rng(1).uniform(-1, 1, (500, 2))
    err = model.energy(z) - 0.5 * np.sum(z * z, axis=1)
    assert np.mean(err**2) <= 1e-4
    f = dc.forward(symplectic_vector_field(model, np.array([1.0, 0.0])))
    np.testing.assert_allclose(f, [0.0, -1.0], atol=1e-12)
    g = dc.forward(grad_wrt_inputs(model, np.array([1.0, 2.0]) / 2))
    np.testing.assert_allclose(g, [0.5, 1.0], atol=1e-12)


def test_zero_mlp_is_zero():
    model = MlpHamiltonian(2, (5, 5))
    assert dc.forward(eval_hamiltonian(model, np.array([0.3, -2.0]))) == 0.0


def test_zero_baseline_is_zero():
    net = BaselineNet(4, (5,))
    out = dc.forward(baseline_forward(net, np.ones(4)))
    np.testing.assert_array_equal(out, np.zeros(4))


@pytest.mark.parametrize("dim", [2, 8, 12])
def test_baseline_output_dimension(dim):
    net = BaselineNet(dim, (7,), np.random.default_rng(0))
    assert net.field(np.zeros((3, dim))).shape == (3, dim)


def test_dimension_mismatch():
    rng = np.random.default_rng(0)
    for model in small_models(2, rng, rng.normal(size=(10, 2))).values():
        with pytest.raises(ShapeError):
            model.field(np.zeros(4))
    with pytest.raises(ShapeError):
        eval_hamiltonian(MlpHamiltonian(2, (3,), rng), np.zeros(3))
    with pytest.raises(ShapeError):
        baseline_forward(BaselineNet(2, (3,), rng), np.zeros(3))


def test_field_on_baseline_is_rejected():
    with pytest.raises(ModelKindError):
        symplectic_vector_field(BaselineNet(2, (3,)), np.zeros(2))


def test_true_system_quadratic_and_linear():
    model = TrueSystem(SPECS["spring_mass"])
    np.testing.assert_allclose(model.input_gradient(np.array([1.0, 2.0])), [1.0, 2.0])
    np.testing.assert_allclose(model.field(np.array([1.0, 0.0])), [0.0, -1.0])


def test_hamiltonian_linear_in_momentum_gives_unit_field():
    # H = p: one edge column, q edge zero, p edge identity spline
    G, k = 2, 1
    model = KarHamiltonian([2, 1], G, k, [[(-1.0, 1.0), (-1.0, 1.0)]])
    grid = spline.SplineGrid(-1.0, 1.0, G, k)
    c = spline.fit_coefficients(grid, np.linspace(-1, 1, 11), np.linspace(-1, 1, 11))
    theta = np.concatenate([np.zeros(G + k), c, np.zeros(2), np.ones(2)])
    model.store.set_flat(theta)
    z = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    np.testing.assert_allclose(model.field(z), np.tile([1.0, 0.0], (20, 1)), atol=1e-12)


def _families(kind, rng):
    spec = SPECS[kind]
    states = np.stack([random_state(spec, rng) for _ in range(30)])
    return spec, states, small_models(spec.dim, rng, states)


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_graph_matches_numpy(kind):
    rng = np.random.default_rng(2)
    spec, states, models = _families(kind, rng)
    for name, model in models.items():
        if name == "baseline":
            np.testing.assert_allclose(dc.forward(baseline_forward(model, states)), model.field(states), atol=1e-13)
            continue
        np.testing.assert_allclose(dc.forward(eval_hamiltonian(model, states)), model.energy(states), atol=1e-13)
        np.testing.assert_allclose(dc.forward(grad_wrt_inputs(model, states)), model.input_gradient(states),
                                   atol=1e-13)


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_input_gradient_matches_finite_difference(kind):
    rng = np.random.default_rng(3)
    spec, states, models = _families(kind, rng)
    for name in ("hnn", "kar"):
        model = models[name]
        for z in states[:10]:
            fd = central_difference(lambda x: float(model.energy(x)), z, h=1e-5)
            g = model.input_gradient(z)
            assert np.all(np.abs(g - fd) <= 1e-6 * np.maximum(np.abs(fd), 1.0))


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_field_is_j_grad(kind):
    rng = np.random.default_rng(4)
    spec, states, models = _families(kind, rng)
    J = symplectic_matrix(spec.d)
    for name in ("hnn", "kar"):
        model = models[name]
        grad = dc.forward(grad_wrt_inputs(model, states))
        field = dc.forward(symplectic_vector_field(model, states))
        np.testing.assert_array_equal(field, grad @ J.T)


def _divergence(model, z, h=1e-5):
    div = 0.0
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h
        div += (model.field(z + e)[i] - model.field(z - e)[i]) / (2 * h)
    return div


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_divergence_free(kind):
    rng = np.random.default_rng(5)
    spec, _, models = _families(kind, rng)
    for name in ("hnn", "kar"):
        model = models[name]
        for _ in range(100 // len(SPECS)):
            z = random_state(spec, rng)
            assert abs(_divergence(model, z)) <= 1e-5


def test_sum_of_models_gradients_add():
    rng = np.random.default_rng(6)
    a = MlpHamiltonian(2, (6,), rng)
    b = KarHamiltonian.initialize([2, 2, 1], 2, 3, rng.normal(size=(10, 2)), rng)
    z = rng.normal(size=(5, 2))
    both = dc.forward(grad_wrt_inputs(a, z) + grad_wrt_inputs(b, z))
    total = a.input_gradient(z) + b.input_gradient(z)
    assert np.max(np.abs(both - total)) <= 1e-12


def test_output_bias_shift_leaves_field_unchanged():
    rng = np.random.default_rng(7)
    model = MlpHamiltonian(4, (10, 10), rng)
    z = rng.normal(size=(6, 4))
    e0, f0 = model.energy(z), model.field(z)
    theta = model.store.theta.copy()
    theta[model.store.slices()["b2"]] += 3.25
    model.store.set_flat(theta)
    np.testing.assert_allclose(model.energy(z) - e0, 3.25, atol=1e-12)
    assert np.max(np.abs(model.field(z) - f0)) <= 1e-12


def test_baseline_learns_spring_field():
    spec = SPECS["spring_mass"]
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, (200, 2))
    ds = systems.Dataset(spec, [systems.Trajectory(np.arange(200.0), z, systems.true_vector_field(spec, z),
                                                   systems.hamiltonian(spec, z))], [], 0.0, 0)
    cfg = TrainConfig("baseline", {"hidden": [32, 32]}, "adam", lr=1e-2, steps=800)
    net, _ = train(cfg, ds)
    zt = rng.uniform(-1, 1, (300, 2))
    assert np.mean(np.sum((net.field(zt) - systems.true_vector_field(spec, zt)) ** 2, axis=1)) <= 1e-3


def _random_model(seed):
    rng = np.random.default_rng(seed)
    kind = seed % 3
    dim = int(rng.choice([2, 8, 12]))
    if kind == 0:
        return BaselineNet(dim, tuple(rng.integers(1, 9, rng.integers(1, 3))), rng)
    if kind == 1:
        return MlpHamiltonian(dim, tuple(rng.integers(1, 9, rng.integers(1, 3))), rng)
    widths = [dim, *rng.integers(1, 5, rng.integers(0, 3)), 1]
    return KarHamiltonian.initialize(widths, int(rng.integers(1, 4)), int(rng.integers(1, 6)),
                                     rng.normal(size=(15, dim)), rng)


@pytest.mark.parametrize("seed", range(50))
def test_serialization_round_trip(seed):
    model = _random_model(seed)
    back = deserialize_model(serialize_model(model))
    assert type(back) is type(model)
    assert back.arch() == model.arch()
    assert back.store.theta.tobytes() == model.store.theta.tobytes()
    z = np.random.default_rng(seed).normal(size=(4, model.dim))
    np.testing.assert_array_equal(back.field(z), model.field(z))


def test_true_system_round_trip():
    back = deserialize_model(serialize_model(TrueSystem(SPECS["three_body"])))
    assert back.spec == SPECS["three_body"]


@given(cut=st.integers(0, 200))
def test_truncated_file(cut):
    data = serialize_model(_random_model(2))
    cut = min(cut, len(data) - 1)
    with pytest.raises(FormatError):
        deserialize_model(data[:cut])


def test_version_mismatch_names_versions():
    data = bytearray(serialize_model(_random_model(1)))
    data[4:8] = struct.pack("<I", 7)
    with pytest.raises(FormatError, match="expected 1, found 7") as info:
        deserialize_model(bytes(data))
    assert info.value.offset == 4


def test_bad_magic_and_trailing_bytes():
    data = serialize_model(_random_model(0))
    with pytest.raises(FormatError) as info:
        deserialize_model(b"XXXX" + data[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError, match="trailing"):
        deserialize_model(data + b"\0")


def test_corrupt_header():
    data = bytearray(serialize_model(_random_model(0)))
    data[12] = ord("[")
    with pytest.raises(FormatError, match="header"):
        deserialize_model(bytes(data))


def test_hidden_grid_update_covers_activations_and_keeps_function():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(300, 4))
    model = KarHamiltonian.initialize([4, 5, 3, 1], 3, 3, z, rng)
    theta = model.store.theta.copy()
    # push hidden activations well outside the construction-time domains
    theta[model.store.slices()["wb0"]] *= 4.0
    model.store.set_flat(theta)
    first = model.domains[0].copy()
    before = model.energy(z)
    model.update_hidden_grids(z)
    np.testing.assert_array_equal(model.domains[0], first)
    x = z
    for l in range(model.n_layers):
        lo, hi = model.domains[l][:, 0], model.domains[l][:, 1]
        assert np.all((x >= lo) & (x <= hi))
        x = model._layer_np(l, x, 0)
    after = model.energy(z)
    assert np.sqrt(np.mean((after - before) ** 2)) <= 0.1 * np.std(before)
    back = deserialize_model(serialize_model(model))
    np.testing.assert_array_equal(back.energy(z), after)


def test_grid_update_is_idempotent_on_a_fit_grid():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(200, 2))
    model = KarHamiltonian.initialize([2, 3, 1], 2, 3, z, rng)
    model.update_hidden_grids(z)
    e1, d1 = model.energy(z), [d.copy() for d in model.domains]
    model.update_hidden_grids(z)
    for a, b in zip(d1, model.domains):
        np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(model.energy(z), e1, atol=1e-9)
