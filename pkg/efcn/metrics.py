"""Segmentation metrics for set-valued predictions.

Maps of assigned sets and labels are bit-mask arrays of any shape; pixels labeled
with ``UNKNOWN_LABEL`` are excluded from utility, UIoU and calibration and are only
counted by the novelty statistics.
"""

import logging
import typing as T

import numpy as np
import pandas as pd

from .belief import PignisticDist
from .constants import DEFAULT_CALIBRATION_BINS, DEFAULT_GAMMA_GRID, UNKNOWN_LABEL
from .errors import ConfigurationError, InvalidLabelError, ShapeError
from .frame import ActList, ClassSet, Frame, membership
from .utility import UtilityTable, expected_utilities_arrays, select_act_map

logger = logging.getLogger(__name__)

_BIN_TOLERANCE = 1e-12


class SegResult:
    __slots__ = ("assigned", "betp", "labels")

    def __init__(self, assigned: np.ndarray, betp: np.ndarray, labels: np.ndarray):
        self.assigned = np.asarray(assigned, dtype=np.uint64)
        self.betp = np.asarray(betp, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.uint64)
        if self.assigned.shape != self.labels.shape:
            raise ShapeError(
                f"Assigned map {self.assigned.shape} and labels {self.labels.shape}"
            )
        if self.betp.shape[:-1] != self.labels.shape:
            raise ShapeError(f"BetP map {self.betp.shape} and labels {self.labels.shape}")
        if np.any(self.assigned == 0):
            raise InvalidLabelError("Empty assigned set")

    @classmethod
    def from_betp(
        cls, betp: np.ndarray, labels: np.ndarray, table: UtilityTable
    ) -> "SegResult":
        """Assign every pixel by maximum expected utility under ``table``."""
        eu = expected_utilities_arrays(betp, table.extended)
        return cls(select_act_map(eu, table.acts), betp, labels)

    @property
    def known(self) -> np.ndarray:
        return self.labels != UNKNOWN_LABEL

    @property
    def M(self) -> int:
        return self.betp.shape[-1]


class CalibrationReport(T.NamedTuple):
    Q: int
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    bin_confidence: np.ndarray
    bin_utility: np.ndarray
    ece: float

    @property
    def bin_fractions(self) -> np.ndarray:
        total = self.bin_counts.sum()
        return self.bin_counts / total if total else np.zeros(self.Q)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "q": np.arange(1, self.Q + 1),
                "lower": self.bin_edges[:-1],
                "upper": self.bin_edges[1:],
                "count": self.bin_counts,
                "fraction": self.bin_fractions,
                "confidence": self.bin_confidence,
                "utility": self.bin_utility,
                "gap": np.abs(self.bin_confidence - self.bin_utility),
            }
        )


def pixel_utilities(result: SegResult, table: UtilityTable) -> np.ndarray:
    known = result.known
    return table.soft_utility(result.assigned[known], result.labels[known])


def pixel_utility(result: SegResult, table: UtilityTable) -> float:
    utilities = pixel_utilities(result, table)
    if utilities.size == 0:
        return float("nan")
    return float(utilities.mean())


def label_universe(result: SegResult) -> T.List[ClassSet]:
    known = result.known
    bits = np.union1d(result.labels[known], result.assigned[known])
    return sorted((ClassSet(int(b)) for b in bits), key=lambda s: s.sort_key)


def uiou(
    result: SegResult,
    table: UtilityTable,
    universe: T.Optional[T.Sequence[ClassSet]] = None,
) -> float:
    """Utility-weighted intersection over union, averaged over the label universe.

    For each ``B`` the ground truth is ``{i: A*(i) = B}`` and the prediction is
    ``{i: A(i) ∩ B ≠ ∅}``; pixels in both contribute ``soft[A(i), B]``. Sets ``B``
    with an empty union are skipped.
    """
    known = result.known
    assigned = result.assigned[known]
    labels = result.labels[known]
    universe = label_universe(result) if universe is None else list(universe)
    terms = []
    for label in universe:
        bits = np.uint64(label.bits)
        truth = labels == bits
        predicted = (assigned & bits) != 0
        union = np.count_nonzero(truth | predicted)
        if union == 0:
            continue
        both = truth & predicted
        numerator = 0.0
        if np.any(both):
            numerator = float(
                table.soft_utility(assigned[both], np.full(both.sum(), bits)).sum()
            )
        terms.append(numerator / union)
    if not terms:
        return 0.0
    return float(np.mean(terms))


def mean_iou(assigned: np.ndarray, labels: np.ndarray, M: int) -> float:
    """Classical mean IoU from a confusion matrix (precise labels and assignments)."""
    assigned = np.asarray(assigned, dtype=np.uint64).reshape(-1)
    labels = np.asarray(labels, dtype=np.uint64).reshape(-1)
    keep = labels != UNKNOWN_LABEL
    predicted = _singleton_index(assigned[keep], M)
    truth = _singleton_index(labels[keep], M)
    confusion = np.bincount(truth * M + predicted, minlength=M * M).reshape(M, M)
    intersection = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - intersection
    present = union > 0
    if not np.any(present):
        return 0.0
    return float(np.mean(intersection[present] / union[present]))


def _singleton_index(bits: np.ndarray, M: int) -> np.ndarray:
    members = membership(bits, M)
    if np.any(members.sum(axis=-1) != 1):
        raise InvalidLabelError("Mean IoU needs singleton assignments and labels")
    return np.argmax(members, axis=-1)


def confidence(betp_pixel: PignisticDist, label: ClassSet) -> float:
    """Pignistic probability of the label."""
    if label.is_empty:
        raise InvalidLabelError("Confidence of an empty label")
    return float(betp_pixel.probs[list(label.indices())].sum())


def confidence_map(betp: np.ndarray, label_bits: np.ndarray) -> np.ndarray:
    betp = np.asarray(betp, dtype=np.float64)
    members = membership(label_bits, betp.shape[-1])
    return np.sum(betp * members, axis=-1)


def calibration_from_arrays(
    confidences: np.ndarray, utilities: np.ndarray, Q: int = DEFAULT_CALIBRATION_BINS
) -> CalibrationReport:
    """Bin pixels by confidence into ``((q-1)/Q, q/Q]`` and compute the ECE."""
    if Q < 1:
        raise ConfigurationError(f"Calibration needs at least one bin, got {Q}")
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    utilities = np.asarray(utilities, dtype=np.float64).reshape(-1)
    bins = np.clip(np.ceil(confidences * Q - _BIN_TOLERANCE).astype(int), 1, Q) - 1
    counts = np.bincount(bins, minlength=Q)
    sum_confidence = np.bincount(bins, weights=confidences, minlength=Q)
    sum_utility = np.bincount(bins, weights=utilities, minlength=Q)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_confidence = np.where(counts > 0, sum_confidence / counts, 0.0)
        mean_utility = np.where(counts > 0, sum_utility / counts, 0.0)
    total = counts.sum()
    ece = (
        float(np.sum(counts * np.abs(mean_confidence - mean_utility)) / total)
        if total
        else 0.0
    )
    return CalibrationReport(
        Q=Q,
        bin_edges=np.linspace(0.0, 1.0, Q + 1),
        bin_counts=counts,
        bin_confidence=mean_confidence,
        bin_utility=mean_utility,
        ece=ece,
    )


def calibration(
    result: SegResult, table: UtilityTable, Q: int = DEFAULT_CALIBRATION_BINS
) -> CalibrationReport:
    known = result.known
    confidences = confidence_map(result.betp[known], result.labels[known])
    return calibration_from_arrays(confidences, pixel_utilities(result, table), Q)


class NoveltyReport(T.NamedTuple):
    unknown_omega_rate: float
    known_omega_rate: float
    unknown_pixels: int
    known_pixels: int
    assignments: pd.DataFrame
    containing: pd.DataFrame


def novelty_stats(
    result: SegResult,
    known: Frame,
    novel: T.Optional[np.ndarray] = None,
    top: int = 3,
) -> NoveltyReport:
    """Rejection rates to Ω and what unknown-class pixels are assigned to.

    ``novel`` optionally names the unknown class of each pixel (0 for known pixels);
    without it all unknown pixels form one group with id 1.
    """
    omega = np.uint64(known.omega.bits)
    unknown_mask = result.labels == UNKNOWN_LABEL
    known_mask = ~unknown_mask
    rejected = result.assigned == omega

    def rate(mask: np.ndarray) -> float:
        count = np.count_nonzero(mask)
        return float(np.count_nonzero(rejected & mask) / count) if count else 0.0

    if novel is None:
        groups = unknown_mask.astype(np.int64)
    else:
        groups = np.where(unknown_mask, np.asarray(novel, dtype=np.int64), 0)
        groups = np.where(unknown_mask & (groups == 0), 1, groups)

    assignment_rows = []
    containing_rows = []
    members = membership(result.assigned, known.M)
    for group in np.unique(groups[unknown_mask]).tolist():
        mask = groups == group
        total = np.count_nonzero(mask)
        bits, counts = np.unique(result.assigned[mask], return_counts=True)
        for index in np.argsort(-counts, kind="stable")[:top]:
            assignment_rows.append(
                {
                    "unknown": group,
                    "assigned": ClassSet(int(bits[index])).describe(known),
                    "fraction": counts[index] / total,
                }
            )
        fractions = members[mask].sum(axis=0) / total
        for j, name in enumerate(known.names):
            containing_rows.append(
                {"unknown": group, "class": name, "fraction": float(fractions[j])}
            )

    report = NoveltyReport(
        unknown_omega_rate=rate(unknown_mask),
        known_omega_rate=rate(known_mask),
        unknown_pixels=int(np.count_nonzero(unknown_mask)),
        known_pixels=int(np.count_nonzero(known_mask)),
        assignments=pd.DataFrame(
            assignment_rows, columns=["unknown", "assigned", "fraction"]
        ),
        containing=pd.DataFrame(containing_rows, columns=["unknown", "class", "fraction"]),
    )
    logger.debug(
        f"Novelty: {report.unknown_omega_rate:.3f} of unknown and "
        f"{report.known_omega_rate:.3f} of known pixels assigned to Ω"
    )
    return report


class EvaluationReport(T.NamedTuple):
    pu: float
    uiou: float
    calibration: CalibrationReport

    @property
    def ece(self) -> float:
        return self.calibration.ece

    def to_frame(self) -> pd.DataFrame:
        """Summary rows (``metric``, ``value``) followed by one row per bin."""
        summary = pd.DataFrame(
            {"metric": ["PU", "UIoU", "ECE"], "value": [self.pu, self.uiou, self.ece]}
        )
        bins = self.calibration.to_frame()[["q", "count", "confidence", "utility"]]
        bins.insert(0, "metric", "bin")
        return pd.concat([summary, bins], ignore_index=True)


def evaluate(
    result: SegResult, table: UtilityTable, Q: int = DEFAULT_CALIBRATION_BINS
) -> EvaluationReport:
    return EvaluationReport(
        pu=pixel_utility(result, table),
        uiou=uiou(result, table),
        calibration=calibration(result, table, Q),
    )


def sweep_gamma(
    betp: np.ndarray,
    labels: np.ndarray,
    frame: Frame,
    acts: ActList,
    gammas: T.Sequence[float] = DEFAULT_GAMMA_GRID,
    Q: int = DEFAULT_CALIBRATION_BINS,
    base: T.Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """Decide and evaluate the same pignistic maps for every tolerance in ``gammas``."""
    labels = np.asarray(labels, dtype=np.uint64)
    rows = []
    for gamma in gammas:
        table = UtilityTable.build(frame, acts, gamma, base=base)
        result = SegResult.from_betp(betp, labels, table)
        report = evaluate(result, table, Q)
        novelty = novelty_stats(result, frame)
        known = result.known
        imprecise = membership(result.assigned[known], frame.M).sum(axis=-1) > 1
        rows.append(
            {
                "gamma": float(gamma),
                "pu": report.pu,
                "uiou": report.uiou,
                "ece": report.ece,
                "known_omega_rate": novelty.known_omega_rate,
                "unknown_omega_rate": novelty.unknown_omega_rate,
                "imprecise_rate": float(imprecise.mean()) if imprecise.size else 0.0,
            }
        )
        logger.info(
            f"gamma={gamma:.2f}: PU={report.pu:.4f} UIoU={report.uiou:.4f} "
            f"ECE={report.ece:.4f}"
        )
    return pd.DataFrame(rows)
