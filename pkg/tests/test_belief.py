import numpy as np
import pytest

from efcn.belief import (
    GeneralMass,
    MassVector,
    combine_simple,
    dempster_oracle,
    logical_mass,
    normalize,
    normalize_arrays,
    pignistic,
    pignistic_general,
)
from efcn.errors import (
    ContractViolation,
    DegenerateEvidenceError,
    DimensionError,
    NonCombinableError,
)
from efcn.frame import ClassSet


@pytest.fixture
def worked_pair():
    mu = MassVector([0.5, 0.0], 0.5)
    m = MassVector([0.0, 0.4], 0.6)
    return mu, m


def random_mass(rng, M):
    values = rng.random(M + 1)
    # a few exact zeros exercise empty focal sets
    values[rng.random(M + 1) < 0.2] = 0.0
    values[-1] += 1e-3
    values /= values.sum()
    return MassVector.from_array(values)


def test_combine_worked_pair(worked_pair):
    mu, m = worked_pair
    combined = combine_simple(mu, m)
    np.testing.assert_allclose(combined.singleton_masses, [0.3, 0.2])
    assert combined.omega_mass == pytest.approx(0.3)

    normalized = normalize(combined)
    np.testing.assert_allclose(
        normalized.as_array(), [0.375, 0.25, 0.375], atol=1e-12
    )


def test_vacuous_is_neutral(rng):
    m = random_mass(rng, 4)
    combined = combine_simple(MassVector.vacuous(4), m)
    np.testing.assert_allclose(combined.as_array(), m.as_array())

    chain = MassVector.vacuous(3)
    for _ in range(5):
        chain = combine_simple(chain, MassVector.vacuous(3))
    np.testing.assert_array_equal(chain.as_array(), [0, 0, 0, 1])


def test_combination_is_commutative_and_associative(rng):
    for _ in range(200):
        M = int(rng.integers(2, 9))
        a, b, c = (random_mass(rng, M) for _ in range(3))
        np.testing.assert_allclose(
            combine_simple(a, b).as_array(), combine_simple(b, a).as_array(), atol=1e-15
        )
        left = combine_simple(combine_simple(a, b), c)
        right = combine_simple(a, combine_simple(b, c))
        np.testing.assert_allclose(left.as_array(), right.as_array(), atol=1e-12)
        np.testing.assert_allclose(
            normalize(left).as_array(), normalize(right).as_array(), atol=1e-9
        )


def test_normalize_is_idempotent(rng):
    m = random_mass(rng, 3)
    np.testing.assert_allclose(normalize(m).as_array(), m.as_array())


def test_normalize_zero_mass():
    with pytest.raises(DegenerateEvidenceError):
        normalize(MassVector([0.0, 0.0], 0.0))


def test_normalize_arrays_replaces_degenerate_entries():
    mu = np.array([[0.2, 0.2, 0.1], [0.0, 0.0, 0.0]])
    normalized, degenerate = normalize_arrays(mu)
    assert degenerate.tolist() == [False, True]
    np.testing.assert_allclose(normalized[0], [0.4, 0.4, 0.2])
    np.testing.assert_array_equal(normalized[1], [0.0, 0.0, 1.0])


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        combine_simple(MassVector.vacuous(2), MassVector.vacuous(3))


def test_oracle_worked_pair(worked_pair):
    mu, m = worked_pair
    combined = dempster_oracle(
        GeneralMass.from_mass_vector(mu), GeneralMass.from_mass_vector(m)
    )
    assert combined[ClassSet(0b01)] == pytest.approx(0.375)
    assert combined[ClassSet(0b10)] == pytest.approx(0.25)
    assert combined[ClassSet(0b11)] == pytest.approx(0.375)


def test_oracle_vacuous_partner(rng):
    m1 = GeneralMass.from_mass_vector(random_mass(rng, 3))
    combined = dempster_oracle(m1, GeneralMass.from_mass_vector(MassVector.vacuous(3)))
    for focal_set, mass in m1.assignments.items():
        assert combined[focal_set] == pytest.approx(mass)


def test_total_conflict():
    m1 = GeneralMass(2, {ClassSet(0b01): 1.0})
    m2 = GeneralMass(2, {ClassSet(0b10): 1.0})
    with pytest.raises(NonCombinableError):
        dempster_oracle(m1, m2)


def test_recursion_matches_oracle(rng):
    for _ in range(1000):
        M = int(rng.integers(2, 9))
        mu, m = random_mass(rng, M), random_mass(rng, M)
        fast = normalize(combine_simple(mu, m))
        oracle = dempster_oracle(
            GeneralMass.from_mass_vector(mu), GeneralMass.from_mass_vector(m)
        ).to_mass_vector()
        np.testing.assert_allclose(fast.as_array(), oracle.as_array(), atol=1e-9)


def test_pignistic_examples():
    np.testing.assert_allclose(pignistic(MassVector.vacuous(4)).probs, [0.25] * 4)
    betp = pignistic(MassVector([0.375, 0.25], 0.375))
    np.testing.assert_allclose(betp.probs, [0.5625, 0.4375])
    np.testing.assert_array_equal(pignistic(MassVector([1.0, 0, 0], 0.0)).probs, [1, 0, 0])


def test_pignistic_requires_normalized_mass():
    with pytest.raises(ContractViolation):
        pignistic(MassVector([0.3, 0.2], 0.3))


def test_pignistic_general_of_logical_mass():
    betp = pignistic_general(logical_mass(ClassSet(0b011), 3))
    np.testing.assert_allclose(betp.probs, [0.5, 0.5, 0.0])


def test_pignistic_agrees_with_general_form(rng):
    m = random_mass(rng, 5)
    np.testing.assert_allclose(
        pignistic(m).probs, pignistic_general(GeneralMass.from_mass_vector(m)).probs
    )


def test_negative_mass_rejected():
    with pytest.raises(ContractViolation):
        MassVector([0.5, -0.1], 0.6)
