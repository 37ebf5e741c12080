"""Mass functions restricted to singletons plus Ω, and a general power-set oracle.

Arrays of masses use the layout ``(..., M + 1)``: the first ``M`` entries are the
singleton masses ``m({ω_j})`` and the last entry is ``m(Ω)``.
"""

import logging
import typing as T

import numpy as np

from .constants import MAX_ORACLE_CLASSES, NORMALIZATION_TOLERANCE
from .errors import (
    ContractViolation,
    DegenerateEvidenceError,
    DimensionError,
    InvalidLabelError,
    NonCombinableError,
)
from .frame import ClassSet

logger = logging.getLogger(__name__)


class MassVector:
    __slots__ = ("singleton_masses", "omega_mass")

    def __init__(self, singleton_masses: T.Sequence[float], omega_mass: float):
        self.singleton_masses = np.asarray(singleton_masses, dtype=np.float64)
        self.omega_mass = float(omega_mass)
        if self.singleton_masses.ndim != 1:
            raise DimensionError("Singleton masses must form a vector")
        if np.any(self.singleton_masses < 0) or self.omega_mass < 0:
            raise ContractViolation("Masses must be non-negative")

    @classmethod
    def vacuous(cls, M: int) -> "MassVector":
        return cls(np.zeros(M), 1.0)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "MassVector":
        array = np.asarray(array, dtype=np.float64)
        return cls(array[:-1], array[-1])

    @property
    def M(self) -> int:
        return self.singleton_masses.shape[0]

    @property
    def total(self) -> float:
        return float(self.singleton_masses.sum() + self.omega_mass)

    def as_array(self) -> np.ndarray:
        return np.append(self.singleton_masses, self.omega_mass)

    def __repr__(self) -> str:
        return (
            f"MassVector(singletons={self.singleton_masses.tolist()}, "
            f"omega={self.omega_mass})"
        )


class GeneralMass:
    """Mass function with arbitrary focal sets (test oracle only)."""

    __slots__ = ("M", "assignments")

    def __init__(self, M: int, assignments: T.Mapping[ClassSet, float]):
        self.M = int(M)
        self.assignments: T.Dict[ClassSet, float] = {}
        for focal_set, mass in assignments.items():
            if focal_set.bits >> self.M:
                raise InvalidLabelError(f"{focal_set} lies outside a frame of {M}")
            if mass < 0:
                raise ContractViolation("Masses must be non-negative")
            if mass > 0:
                self.assignments[focal_set] = (
                    self.assignments.get(focal_set, 0.0) + float(mass)
                )

    @classmethod
    def from_mass_vector(cls, m: MassVector) -> "GeneralMass":
        assignments = {
            ClassSet(1 << j): mass for j, mass in enumerate(m.singleton_masses)
        }
        assignments[ClassSet((1 << m.M) - 1)] = m.omega_mass
        return cls(m.M, assignments)

    def to_mass_vector(self) -> MassVector:
        omega = ClassSet((1 << self.M) - 1)
        singletons = np.zeros(self.M)
        omega_mass = 0.0
        for focal_set, mass in self.assignments.items():
            if focal_set == omega:
                omega_mass += mass
            elif len(focal_set) == 1:
                singletons[focal_set.indices()[0]] += mass
            else:
                raise ContractViolation(f"Focal set {focal_set} is not a singleton")
        return MassVector(singletons, omega_mass)

    def __getitem__(self, focal_set: ClassSet) -> float:
        return self.assignments.get(focal_set, 0.0)


class PignisticDist:
    __slots__ = ("probs",)

    def __init__(self, probs: T.Sequence[float]):
        self.probs = np.asarray(probs, dtype=np.float64)

    @property
    def M(self) -> int:
        return self.probs.shape[0]


def combine_arrays(mu: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Unnormalized conjunctive combination of singleton+Ω masses, ``(..., M + 1)``."""
    mu_singletons, mu_omega = mu[..., :-1], mu[..., -1:]
    m_singletons, m_omega = m[..., :-1], m[..., -1:]
    singletons = mu_singletons * (m_singletons + m_omega) + mu_omega * m_singletons
    return np.concatenate([singletons, mu_omega * m_omega], axis=-1)


def combine_simple(mu: MassVector, m: MassVector) -> MassVector:
    if mu.M != m.M:
        raise DimensionError(f"Cannot combine masses over {mu.M} and {m.M} classes")
    return MassVector.from_array(combine_arrays(mu.as_array(), m.as_array()))


def normalize_arrays(mu: np.ndarray) -> T.Tuple[np.ndarray, np.ndarray]:
    """Normalize along the last axis.

    Returns the normalized masses and the boolean map of degenerate (zero total)
    entries, which are replaced by the vacuous mass function.
    """
    total = mu.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] <= 0.0
    safe_total = np.where(total > 0.0, total, 1.0)
    normalized = mu / safe_total
    if np.any(degenerate):
        normalized[degenerate] = 0.0
        normalized[degenerate, -1] = 1.0
    return normalized, degenerate


def normalize(mu: MassVector) -> MassVector:
    total = mu.total
    if not total > 0.0:
        raise DegenerateEvidenceError("Total mass is zero; nothing to normalize")
    return MassVector(mu.singleton_masses / total, mu.omega_mass / total)


def dempster_oracle(m1: GeneralMass, m2: GeneralMass) -> GeneralMass:
    """Dempster's rule by explicit double loop over focal sets."""
    if m1.M != m2.M:
        raise DimensionError(f"Cannot combine masses over {m1.M} and {m2.M} classes")
    if m1.M > MAX_ORACLE_CLASSES:
        raise ContractViolation(
            f"The power-set oracle is limited to {MAX_ORACLE_CLASSES} classes"
        )
    conjunctive: T.Dict[int, float] = {}
    for a, mass_a in m1.assignments.items():
        for b, mass_b in m2.assignments.items():
            bits = a.bits & b.bits
            conjunctive[bits] = conjunctive.get(bits, 0.0) + mass_a * mass_b
    conflict = conjunctive.pop(0, 0.0)
    denominator = sum(conjunctive.values())
    if not denominator > 0.0:
        raise NonCombinableError(f"Total conflict ({conflict}) between mass functions")
    return GeneralMass(
        m1.M,
        {ClassSet(bits): mass / denominator for bits, mass in conjunctive.items()},
    )


def pignistic_arrays(masses: np.ndarray) -> np.ndarray:
    M = masses.shape[-1] - 1
    return masses[..., :-1] + masses[..., -1:] / M


def pignistic(m: MassVector) -> PignisticDist:
    if abs(m.total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ContractViolation(f"Pignistic transform of unnormalized mass ({m.total})")
    return PignisticDist(pignistic_arrays(m.as_array()))


def pignistic_general(m: GeneralMass) -> PignisticDist:
    total = sum(m.assignments.values())
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ContractViolation(f"Pignistic transform of unnormalized mass ({total})")
    probs = np.zeros(m.M)
    for focal_set, mass in m.assignments.items():
        indices = list(focal_set.indices())
        probs[indices] += mass / len(indices)
    return PignisticDist(probs)


def logical_mass(label: ClassSet, M: int) -> GeneralMass:
    if label.is_empty:
        raise InvalidLabelError("A logical mass function needs a non-empty focal set")
    return GeneralMass(M, {label: 1.0})
