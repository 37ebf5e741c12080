"""Utility layer: OWA-extended utilities, expected utilities and set-valued decisions."""

import logging
import typing as T

import numpy as np
from scipy.optimize import brentq

from .belief import PignisticDist
from .constants import ACT_TIE_TOLERANCE, OWA_TOLERANCE
from .errors import (
    ConfigurationError,
    ContractViolation,
    DegenerateLabelError,
    DimensionError,
    NumericError,
)
from .frame import ActList, ClassSet, Frame

logger = logging.getLogger(__name__)

MIN_GAMMA = 0.5
MAX_GAMMA = 1.0


def tdi(weights: np.ndarray) -> float:
    """Tolerance to imprecision (orness) of an OWA weight vector."""
    weights = np.asarray(weights, dtype=np.float64)
    k = weights.shape[0]
    if k == 1:
        return 1.0
    return float(np.dot((k - 1 - np.arange(k)) / (k - 1), weights))


def owa_entropy(weights: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    positive = weights[weights > 0]
    return float(-np.sum(positive * np.log(positive)))


def _geometric_weights(ratio: float, k: int) -> np.ndarray:
    weights = ratio ** np.arange(k, dtype=np.float64)
    return weights / weights.sum()


def solve_owa(gamma: float, k: int) -> np.ndarray:
    """Maximum-entropy OWA weights of length ``k`` with orness ``gamma``.

    The solution is geometric, ``g_i ∝ r^(i-1)``; the ratio is found by a bracketing
    root search on the orness residual over ``r ∈ [0, 1]``.

    >>> solve_owa(1.0, 3).tolist()
    [1.0, 0.0, 0.0]
    >>> [round(g, 4) for g in solve_owa(0.8, 3)]
    [0.6819, 0.2363, 0.0819]
    """
    gamma = float(gamma)
    k = int(k)
    if not MIN_GAMMA <= gamma <= MAX_GAMMA:
        raise ConfigurationError(
            f"gamma must lie in [{MIN_GAMMA}, {MAX_GAMMA}], got {gamma}"
        )
    if k < 1:
        raise ConfigurationError(f"OWA weights need k >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    if k == 2:
        return np.array([gamma, 1.0 - gamma])
    if gamma == MIN_GAMMA:
        return np.full(k, 1.0 / k)
    if gamma == MAX_GAMMA:
        weights = np.zeros(k)
        weights[0] = 1.0
        return weights

    def residual(ratio: float) -> float:
        return tdi(_geometric_weights(ratio, k)) - gamma

    ratio = brentq(residual, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    weights = _geometric_weights(ratio, k)
    error = abs(tdi(weights) - gamma)
    if error > OWA_TOLERANCE:
        raise NumericError(
            f"OWA solver did not converge for gamma={gamma}, k={k} (residual {error})"
        )
    return weights


class OwaWeights:
    """Max-entropy weight vectors for one ``gamma``, per act cardinality."""

    __slots__ = ("gamma", "weights_by_cardinality")

    def __init__(self, gamma: float, cardinalities: T.Iterable[int] = ()):
        self.gamma = float(gamma)
        self.weights_by_cardinality: T.Dict[int, np.ndarray] = {}
        for k in sorted(set(cardinalities)):
            self.weights_by_cardinality[k] = solve_owa(self.gamma, k)

    def __getitem__(self, k: int) -> np.ndarray:
        if k not in self.weights_by_cardinality:
            self.weights_by_cardinality[k] = solve_owa(self.gamma, k)
            logger.debug(
                f"OWA weights gamma={self.gamma}, k={k}: "
                f"{self.weights_by_cardinality[k].tolist()}"
            )
        return self.weights_by_cardinality[k]


def extend_utilities(base: np.ndarray, acts: ActList, owa: OwaWeights) -> np.ndarray:
    """OWA of the descending-sorted base utilities ``{u_ij : ω_i ∈ A}`` per act row."""
    base = np.asarray(base, dtype=np.float64)
    M = acts.frame.M
    if base.shape != (M, M):
        raise DimensionError(f"Base utilities must be {M}x{M}, got {base.shape}")
    if np.any(base < 0.0) or np.any(base > 1.0):
        raise ContractViolation("Base utilities must lie in [0, 1]")
    extended = np.empty((len(acts), M))
    for row, act in enumerate(acts):
        members = base[list(act.indices()), :]
        ordered = -np.sort(-members, axis=0)
        extended[row] = owa[len(act)] @ ordered
    return extended


def soft_label_utilities(
    extended: np.ndarray, acts: ActList, labels: T.Sequence[ClassSet]
) -> np.ndarray:
    """Utility of each act against each (possibly set-valued) label.

    The raw value averages the extended utilities over the classes of the label; each
    column is normalized by the label's utility against itself.
    """
    extended = np.asarray(extended, dtype=np.float64)
    if extended.shape != (len(acts), acts.frame.M):
        raise DimensionError(
            f"Extended utilities of shape {extended.shape} do not match "
            f"{len(acts)} acts over {acts.frame.M} classes"
        )
    soft = np.empty((len(acts), len(labels)))
    for column, label in enumerate(labels):
        acts.frame.validate(label)
        if label not in acts:
            raise ContractViolation(
                f"Label {label.describe(acts.frame)} is not one of the acts"
            )
        averaged = extended[:, list(label.indices())].mean(axis=1)
        self_utility = averaged[acts.index(label)]
        if not self_utility > 0.0:
            raise DegenerateLabelError(
                f"Label {label.describe(acts.frame)} has zero utility against itself"
            )
        soft[:, column] = averaged / self_utility
    return soft


class ExpectedUtilities:
    __slots__ = ("values",)

    def __init__(self, values: T.Sequence[float]):
        self.values = np.asarray(values, dtype=np.float64)


class UtilityTable:
    """Base, OWA-extended and soft-label utility matrices for a fixed act list."""

    __slots__ = ("acts", "gamma", "base", "extended", "labels", "soft", "_lookup")

    def __init__(
        self,
        acts: ActList,
        gamma: float,
        base: np.ndarray,
        extended: np.ndarray,
        labels: T.Sequence[ClassSet],
        soft: np.ndarray,
    ):
        self.acts = acts
        self.gamma = float(gamma)
        self.base = base
        self.extended = extended
        self.labels = tuple(labels)
        self.soft = soft
        self._lookup = (_BitLookup(acts.bits), _BitLookup(_bits_of(self.labels)))

    @classmethod
    def build(
        cls,
        frame: Frame,
        acts: ActList,
        gamma: float,
        base: T.Optional[np.ndarray] = None,
        labels: T.Optional[T.Sequence[ClassSet]] = None,
    ) -> "UtilityTable":
        if acts.frame != frame:
            raise DimensionError("Act list was built for a different frame")
        base = np.eye(frame.M) if base is None else np.asarray(base, dtype=np.float64)
        labels = tuple(acts) if labels is None else tuple(labels)
        owa = OwaWeights(gamma, (len(act) for act in acts))
        extended = extend_utilities(base, acts, owa)
        soft = soft_label_utilities(extended, acts, labels)
        logger.debug(
            f"Utility table gamma={gamma}: {len(acts)} acts, {len(labels)} labels"
        )
        return cls(acts, gamma, base, extended, labels, soft)

    @property
    def frame(self) -> Frame:
        return self.acts.frame

    def has_label(self, label: ClassSet) -> bool:
        return label in self.labels

    def labeling_utilities(self, label: ClassSet) -> np.ndarray:
        """Expected utilities of every act under the logical mass on ``label``."""
        self.frame.validate(label)
        return self.extended[:, list(label.indices())].mean(axis=1)

    def act_indices(self, assigned_bits: np.ndarray) -> np.ndarray:
        indices = self._lookup[0](assigned_bits)
        if np.any(indices < 0):
            raise ContractViolation("Assigned sets that are not acts of the table")
        return indices

    def label_indices(self, label_bits: np.ndarray) -> np.ndarray:
        indices = self._lookup[1](label_bits)
        if np.any(indices < 0):
            missing = np.unique(np.asarray(label_bits)[indices < 0])
            raise ConfigurationError(
                f"Labels missing from the utility table: "
                f"{[ClassSet(int(bits)).describe(self.frame) for bits in missing]}"
            )
        return indices

    def soft_utility(
        self, assigned_bits: np.ndarray, label_bits: np.ndarray
    ) -> np.ndarray:
        """Vectorized lookup of ``soft[A(i), A*(i)]`` for bit-mask maps."""
        return self.soft[self.act_indices(assigned_bits), self.label_indices(label_bits)]

    def soft_utility_against(self, assigned_bits: np.ndarray, label: ClassSet):
        column = self.labels.index(label)
        return self.soft[self.act_indices(assigned_bits), column]


class _BitLookup:
    """Map bit masks to their position in a fixed list (-1 when absent)."""

    __slots__ = ("_sorted_bits", "_positions")

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits, dtype=np.uint64)
        order = np.argsort(bits, kind="stable")
        self._sorted_bits = bits[order]
        self._positions = order

    def __call__(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.uint64)
        slot = np.searchsorted(self._sorted_bits, query)
        slot = np.clip(slot, 0, self._sorted_bits.shape[0] - 1)
        found = self._sorted_bits[slot] == query
        return np.where(found, self._positions[slot], -1)


def _bits_of(class_sets: T.Sequence[ClassSet]) -> np.ndarray:
    return np.array([class_set.bits for class_set in class_sets], dtype=np.uint64)


def expected_utilities_arrays(betp: np.ndarray, extended: np.ndarray) -> np.ndarray:
    """``(..., M)`` pignistic probabilities to ``(..., |acts|)`` expected utilities."""
    return np.asarray(betp, dtype=np.float64) @ extended.T


def expected_utilities(betp: PignisticDist, table: UtilityTable) -> ExpectedUtilities:
    if betp.M != table.frame.M:
        raise DimensionError(
            f"Pignistic distribution over {betp.M} classes, table over {table.frame.M}"
        )
    return ExpectedUtilities(table.extended @ betp.probs)


def _canonical_order(acts: ActList) -> np.ndarray:
    cardinalities = [len(act) for act in acts]
    return np.lexsort((acts.bits, cardinalities))


def select_act_indices(eu: np.ndarray, acts: ActList) -> np.ndarray:
    """Index of the best act along the last axis.

    Near-ties (within ``ACT_TIE_TOLERANCE``) go to the smallest set, then to the
    lowest bit value.
    """
    eu = np.asarray(eu, dtype=np.float64)
    if eu.shape[-1] != len(acts):
        raise DimensionError(
            f"{eu.shape[-1]} expected utilities for an act list of {len(acts)}"
        )
    if np.any(np.isnan(eu)):
        raise ContractViolation("NaN expected utility")
    order = _canonical_order(acts)
    ranked = eu[..., order]
    best = ranked.max(axis=-1, keepdims=True)
    first = np.argmax(ranked >= best - ACT_TIE_TOLERANCE, axis=-1)
    return order[first]


def select_act(eu: ExpectedUtilities, acts: ActList) -> ClassSet:
    if len(acts) == 0:
        raise ContractViolation("Empty act list")
    return acts[int(select_act_indices(eu.values, acts))]


def select_act_map(eu_map: np.ndarray, acts: ActList) -> np.ndarray:
    """Assigned bit-mask map for a ``(..., |acts|)`` expected-utility map."""
    return acts.bits[select_act_indices(eu_map, acts)]
