import logging

import numpy as np
import pytest
from scipy.special import logit

from efcn.ds_layer import (
    DsDiagnostics,
    PrototypeBank,
    ds_backward,
    ds_backward_batch,
    ds_forward,
    ds_forward_batch,
    ds_forward_map,
    init_bank,
)
from efcn.errors import ContractViolation, ShapeError, TrainingDivergenceError


def bank_at(x, xi, delta, eta=1.0):
    """Prototypes placed on ``x`` so that every similarity equals its reliability."""
    n = len(xi)
    return PrototypeBank(
        prototypes=np.tile(np.asarray(x, dtype=float), (n, 1)),
        eta=np.full(n, eta),
        xi=np.asarray(xi, dtype=float),
        delta=np.asarray(delta, dtype=float),
    )


def relative_error(a, b, floor=1e-4):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_worked_example_two_prototypes():
    x = np.array([0.3])
    bank = bank_at(x, [logit(0.5), logit(0.4)], [[1.0, 0.0], [0.0, 1.0]])
    m, _ = ds_forward(x, bank)
    np.testing.assert_allclose(m.as_array(), [0.375, 0.25, 0.375], atol=1e-12)


def test_full_reliability_at_prototype():
    x = np.array([0.1, -0.2])
    bank = bank_at(x, [50.0], [[1.0, 0.0, 0.0]])
    m, _ = ds_forward(x, bank)
    assert m.singleton_masses[0] == pytest.approx(1.0)
    assert m.omega_mass == pytest.approx(0.0, abs=1e-12)


def test_unreliable_prototype_is_vacuous(rng):
    bank = init_bank(1, 4, 3, rng)
    bank.xi[:] = -1000.0
    m, _ = ds_forward(rng.normal(size=4), bank)
    np.testing.assert_allclose(m.as_array(), [0, 0, 0, 1], atol=1e-12)


def test_total_conflict_falls_back_to_vacuous(caplog):
    x = np.zeros(1)
    bank = bank_at(x, [40.0, 40.0], [[1.0, 0.0], [0.0, 1.0]])
    diagnostics = DsDiagnostics()
    with caplog.at_level(logging.WARNING):
        masses, trace = ds_forward_batch(x[np.newaxis], bank, diagnostics)
    np.testing.assert_array_equal(masses[0], [0.0, 0.0, 1.0])
    assert trace.degenerate.tolist() == [True]
    assert diagnostics.degenerate_pixels == 1
    assert "zero total mass" in caplog.text

    grad_bank, grad_x = ds_backward_batch(np.ones((1, 3)), trace, x[np.newaxis], bank)
    for array in grad_bank.arrays().values():
        assert np.all(array == 0.0)
    assert np.all(grad_x == 0.0)


def test_zero_upstream_gradient(rng):
    bank = init_bank(3, 4, 3, rng)
    x = rng.normal(size=4)
    _, trace = ds_forward(x, bank)
    grad_bank, grad_x = ds_backward(np.zeros(4), trace, x, bank)
    for array in grad_bank.arrays().values():
        assert np.all(array == 0.0)
    assert np.all(grad_x == 0.0)


def perturbed_objective(bank, x, weights):
    m, _ = ds_forward(x, bank)
    return float(weights @ m.as_array())


def test_gradients_match_finite_differences(rng):
    bank = init_bank(3, 4, 3, rng)
    bank.eta[:] = rng.uniform(0.3, 1.0, size=3)
    bank.xi[:] = rng.normal(size=3)
    x = rng.normal(size=4) * 0.5
    weights = rng.normal(size=4)
    _, trace = ds_forward(x, bank)
    grad_bank, grad_x = ds_backward(weights, trace, x, bank)
    step = 1e-5

    for name, array in bank.arrays().items():
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            plus = perturbed_objective(bank, x, weights)
            array[index] = original - step
            minus = perturbed_objective(bank, x, weights)
            array[index] = original
            numeric[index] = (plus - minus) / (2 * step)
        assert relative_error(getattr(grad_bank, name), numeric) < 1e-5, name

    numeric_x = np.zeros_like(x)
    for i in range(x.size):
        shifted = x.copy()
        shifted[i] += step
        plus = perturbed_objective(bank, shifted, weights)
        shifted[i] -= 2 * step
        minus = perturbed_objective(bank, shifted, weights)
        numeric_x[i] = (plus - minus) / (2 * step)
    assert relative_error(grad_x, numeric_x) < 1e-5


def test_unreliable_prototype_gets_no_location_gradient(rng):
    bank = init_bank(3, 4, 3, rng)
    bank.xi[1] = -1000.0
    x = rng.normal(size=4)
    _, trace = ds_forward(x, bank)
    grad_bank, _ = ds_backward(rng.normal(size=4), trace, x, bank)
    assert np.all(grad_bank.prototypes[1] == 0.0)
    assert grad_bank.eta[1] == 0.0
    assert np.any(grad_bank.prototypes[0] != 0.0)


def test_reliability_gradient_survives_a_vanishing_prototype():
    alpha = 1e-8
    x = np.array([0.6, 0.8])
    bank = PrototypeBank(
        prototypes=np.zeros((1, 2)),
        eta=np.ones(1),
        xi=np.array([logit(alpha)]),
        delta=np.array([[1.0, 0.0, 0.0]]),
    )
    m, trace = ds_forward(x, bank)
    np.testing.assert_allclose(m.as_array(), [0, 0, 0, 1], atol=1e-7)
    grad_bank, _ = ds_backward(np.array([1.0, 0.0, 0.0, 0.0]), trace, x, bank)
    # the objective is m({w1}) = s = alpha * exp(-1) at unit distance
    assert np.all(np.abs(grad_bank.prototypes) < 1e-7)
    assert np.all(np.abs(grad_bank.eta) < 1e-7)
    assert grad_bank.xi[0] != 0.0
    grad_alpha = grad_bank.xi[0] / (alpha * (1 - alpha))
    assert grad_alpha == pytest.approx(np.exp(-1.0), rel=1e-6)


def test_support_decreases_with_distance(rng):
    bank = init_bank(4, 3, 3, rng)
    bank.eta[:] = rng.uniform(0.2, 2.0, size=4)
    bank.xi[:] = rng.normal(size=4)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    steps = np.linspace(0.0, 5.0, 101)
    for l in range(bank.n):
        features = bank.prototypes[l] + steps[:, np.newaxis] * direction
        _, trace = ds_forward_batch(features, bank)
        np.testing.assert_allclose(trace.distances[:, l], steps, atol=1e-9)
        assert trace.similarities[0, l] == pytest.approx(bank.alpha[l])
        assert np.all(np.diff(trace.similarities[:, l]) <= 0.0)
        assert trace.similarities[-1, l] < trace.similarities[0, l]


def test_stale_trace(rng):
    bank = init_bank(3, 4, 3, rng)
    features = rng.normal(size=(5, 4))
    _, trace = ds_forward_batch(features, bank)
    with pytest.raises(ContractViolation):
        ds_backward_batch(np.zeros((4, 4)), trace, features[:4], bank)
    with pytest.raises(ContractViolation):
        ds_backward_batch(np.zeros((5, 4)), trace, features, init_bank(2, 4, 3, rng))


def test_forward_map(rng):
    bank = init_bank(6, 4, 3, rng)
    features = rng.normal(size=(2, 5, 7, 4))
    masses = ds_forward_map(features, bank)
    assert masses.shape == (2, 5, 7, 4)
    np.testing.assert_allclose(masses.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(masses >= 0.0)

    single, _ = ds_forward(features[1, 2, 3], bank)
    np.testing.assert_allclose(masses[1, 2, 3], single.as_array(), atol=1e-12)

    constant = np.broadcast_to(features[0, 0, 0], (3, 3, 4))
    constant_masses = ds_forward_map(constant, bank)
    np.testing.assert_allclose(
        constant_masses, np.broadcast_to(constant_masses[0, 0], constant_masses.shape)
    )


def test_forward_rejects_bad_inputs(rng):
    bank = init_bank(2, 4, 3, rng)
    with pytest.raises(ShapeError):
        ds_forward_batch(np.zeros((3, 5)), bank)
    with pytest.raises(ShapeError):
        ds_forward_map(np.zeros((3, 4)), bank)
    with pytest.raises(TrainingDivergenceError):
        ds_forward_batch(np.full((1, 4), np.nan), bank)
    bank.eta[0] = np.inf
    with pytest.raises(TrainingDivergenceError):
        ds_forward_batch(np.zeros((1, 4)), bank)


def test_init_bank_shapes(rng):
    bank = init_bank(15, 16, 3, rng)
    assert (bank.n, bank.P, bank.M) == (15, 16, 3)
    np.testing.assert_allclose(bank.memberships.sum(axis=1), 1.0)
    np.testing.assert_allclose(bank.alpha, 0.5)
