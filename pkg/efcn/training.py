"""Expected-utility loss with soft labels, its gradients, and end-to-end training.

The loss of a pixel is the squared distance between the expected utilities of the
acts under the predicted mass function and under the logical mass function on the
pixel's (possibly set-valued) label. Batch losses are means over labeled pixels;
pixels with the unknown-class label are ignored.
"""

import dataclasses
import logging
import typing as T

import numpy as np
import pandas as pd
from tqdm import tqdm

from .belief import MassVector, pignistic
from .constants import UNKNOWN_LABEL
from .errors import (
    ConfigurationError,
    ContractViolation,
    TrainingDivergenceError,
)
from .frame import ActList, ClassSet
from .heads import EvidentialHead
from .model import EFCNModel
from .utility import UtilityTable, expected_utilities_arrays, select_act_map

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum")


class SoftTarget(T.NamedTuple):
    label: ClassSet
    acts: ActList
    labeling_eu: np.ndarray

    @classmethod
    def for_label(cls, label: ClassSet, table: UtilityTable) -> "SoftTarget":
        return cls(label, table.acts, table.labeling_utilities(label))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    gamma: float = 0.8
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(
                f"Unknown optimizer `{self.optimizer}` (expected one of {OPTIMIZERS})"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def _check_target(target: SoftTarget, table: UtilityTable):
    if target.acts != table.acts or target.labeling_eu.shape != (len(table.acts),):
        raise ContractViolation("Target and utility table use different act lists")


def _residual(m: MassVector, target: SoftTarget, table: UtilityTable) -> np.ndarray:
    _check_target(target, table)
    return target.labeling_eu - table.extended @ pignistic(m).probs


def loss(m: MassVector, target: SoftTarget, table: UtilityTable) -> float:
    residual = _residual(m, target, table)
    return float(residual @ residual)


def loss_grad_masses(
    m: MassVector, target: SoftTarget, table: UtilityTable
) -> np.ndarray:
    """Derivative w.r.t. the singleton masses with ``m(Ω) = 1 - Σ_k m({ω_k})``.

    ``∂L/∂m({ω_k}) = -2 Σ_A r_A Σ_j ũ_{A,j} (δ_kj - 1/M)`` where ``r`` is the gap
    between labeling and predicted expected utilities.
    """
    residual = _residual(m, target, table)
    return _grad_masses_from_residuals(residual, table.extended)


def loss_grad_betp(
    betp: np.ndarray, target: SoftTarget, table: UtilityTable
) -> np.ndarray:
    _check_target(target, table)
    residual = target.labeling_eu - table.extended @ np.asarray(betp, dtype=np.float64)
    return -2.0 * residual @ table.extended


def _grad_masses_from_residuals(
    residuals: np.ndarray, extended: np.ndarray
) -> np.ndarray:
    weighted = residuals @ extended
    return -2.0 * (weighted - weighted.mean(axis=-1, keepdims=True))


class LabelTargets:
    """Labeling expected utilities per distinct label, computed once."""

    def __init__(self, table: UtilityTable):
        self.table = table
        self._cache: T.Dict[int, np.ndarray] = {}

    def __call__(self, label_bits: np.ndarray) -> np.ndarray:
        label_bits = np.asarray(label_bits, dtype=np.uint64)
        unique, inverse = np.unique(label_bits, return_inverse=True)
        rows = []
        for bits in unique.tolist():
            if bits not in self._cache:
                self._cache[bits] = self.table.labeling_utilities(ClassSet(bits))
            rows.append(self._cache[bits])
        if not rows:
            return np.zeros((0, len(self.table.acts)))
        return np.stack(rows)[inverse.reshape(-1)]


class BatchResult(T.NamedTuple):
    loss: float
    grads: T.Dict[str, np.ndarray]
    pixel_utility: float
    labeled_pixels: int


def batch_objective(
    model: EFCNModel,
    images: np.ndarray,
    label_bits: np.ndarray,
    table: UtilityTable,
    targets: T.Optional[LabelTargets] = None,
    with_gradients: bool = True,
) -> BatchResult:
    """Mean pixel loss of a batch and its gradient w.r.t. every model parameter."""
    targets = targets if targets is not None else LabelTargets(table)
    betp, _, cache = model.forward(images)
    M = model.frame.M
    flat_betp = betp.reshape(-1, M)
    flat_labels = np.asarray(label_bits, dtype=np.uint64).reshape(-1)
    if flat_labels.shape[0] != flat_betp.shape[0]:
        raise ContractViolation(
            f"Label map {np.shape(label_bits)} does not match predictions "
            f"{betp.shape[:-1]}"
        )
    known = flat_labels != UNKNOWN_LABEL
    count = int(known.sum())
    if count == 0:
        return BatchResult(0.0, {}, float("nan"), 0)

    expected = expected_utilities_arrays(flat_betp[known], table.extended)
    residuals = targets(flat_labels[known]) - expected
    value = float(np.sum(residuals**2) / count)
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"Non-finite loss {value}")

    assigned = select_act_map(expected, table.acts)
    pu = float(table.soft_utility(assigned, flat_labels[known]).mean())

    if not with_gradients:
        return BatchResult(value, {}, pu, count)
    if isinstance(model.head, EvidentialHead):
        grad = np.zeros((flat_betp.shape[0], M + 1))
        grad[known, :M] = _grad_masses_from_residuals(residuals, table.extended) / count
    else:
        grad = np.zeros_like(flat_betp, dtype=np.float64)
        grad[known] = -2.0 * residuals @ table.extended / count
    grads = model.backward(grad.reshape(betp.shape[:-1] + (-1,)), cache)
    return BatchResult(value, grads, pu, count)


class SGD:
    """Gradient descent over named arrays, optionally with momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity: T.Dict[str, np.ndarray] = {}

    def step(self, params: T.Dict[str, np.ndarray], grads: T.Mapping[str, np.ndarray]):
        for name, grad in grads.items():
            update = -self.learning_rate * np.asarray(grad, dtype=np.float64)
            if self.momentum:
                velocity = self._velocity.get(name)
                if velocity is not None:
                    update = update + self.momentum * velocity
                self._velocity[name] = update
            param = params[name]
            param += update.astype(param.dtype)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "SGD":
        momentum = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
        return cls(cfg.learning_rate, momentum)


class EpochRecord(T.NamedTuple):
    epoch: int
    loss: float
    pu: float


class History:
    def __init__(self):
        self.records: T.List[EpochRecord] = []

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> EpochRecord:
        return self.records[index]

    @property
    def losses(self) -> T.List[float]:
        return [record.loss for record in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=EpochRecord._fields)


def train(
    model: EFCNModel,
    images: np.ndarray,
    label_bits: np.ndarray,
    table: UtilityTable,
    cfg: TrainConfig,
    progress: bool = False,
) -> T.Tuple[EFCNModel, History]:
    """Mini-batch training of all backbone and head parameters.

    ``images`` is ``(N, H, W, C)`` and ``label_bits`` the ``(N, H, W)`` label bit
    masks of the training split. The model is updated in place and returned.
    """
    images = np.asarray(images)
    label_bits = np.asarray(label_bits, dtype=np.uint64)
    if images.shape[0] == 0:
        raise ConfigurationError("Training set is empty")
    if images.shape[:3] != label_bits.shape:
        raise ContractViolation(
            f"Images {images.shape} and labels {label_bits.shape} do not match"
        )

    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD.from_config(cfg)
    targets = LabelTargets(table)
    params = model.parameters()
    history = History()

    epochs = tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress)
    for epoch in epochs:
        order = rng.permutation(images.shape[0])
        loss_sum, pu_sum, pixels = 0.0, 0.0, 0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            index = np.sort(order[start : start + cfg.batch_size])
            try:
                result = batch_objective(
                    model, images[index], label_bits[index], table, targets
                )
            except TrainingDivergenceError as err:
                raise TrainingDivergenceError(
                    f"{err} at epoch {epoch}, batch {batch}"
                ) from err
            if result.labeled_pixels == 0:
                continue
            optimizer.step(params, result.grads)
            loss_sum += result.loss * result.labeled_pixels
            pu_sum += result.pixel_utility * result.labeled_pixels
            pixels += result.labeled_pixels
        record = EpochRecord(
            epoch, loss_sum / max(pixels, 1), pu_sum / max(pixels, 1)
        )
        history.append(record)
        epochs.set_postfix(loss=f"{record.loss:.4f}", pu=f"{record.pu:.3f}")
        logger.info(f"Epoch {epoch}: loss={record.loss:.5f} PU={record.pu:.4f}")
    return model, history


class GradCheckReport(T.NamedTuple):
    max_relative_error: float
    checked: int
    skipped: int
    worst_parameter: str
    errors_by_parameter: T.Dict[str, float]

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_relative_error < tolerance

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            sorted(self.errors_by_parameter.items()),
            columns=["parameter", "max_relative_error"],
        )


def grad_check(
    model: EFCNModel,
    images: np.ndarray,
    label_bits: np.ndarray,
    table: UtilityTable,
    samples: int = 200,
    step: float = 1e-5,
    jitter: float = 1e-3,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    The images are jittered to move away from ReLU and pooling ties; coordinates
    whose perturbation changes the activation pattern are skipped.
    """
    if model.backbone.dtype != np.float64:
        raise ContractViolation("Gradient checks need a float64 backbone")
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float64)
    images = images + rng.normal(0.0, jitter, size=images.shape)
    targets = LabelTargets(table)

    base = batch_objective(model, images, label_bits, table, targets)
    base_pattern = _pattern(model, images)
    params = model.parameters()

    coordinates = _sample_coordinates(params, samples, rng)
    errors: T.Dict[str, float] = {}
    checked = skipped = 0
    for name, flat_index in coordinates:
        param = params[name].reshape(-1)
        original = param[flat_index]
        values = []
        stable = True
        for sign in (1.0, -1.0):
            param[flat_index] = original + sign * step
            values.append(
                batch_objective(
                    model, images, label_bits, table, targets, with_gradients=False
                ).loss
            )
            stable = stable and _same_pattern(base_pattern, _pattern(model, images))
        param[flat_index] = original
        if not stable:
            skipped += 1
            continue
        numeric = (values[0] - values[1]) / (2.0 * step)
        analytic = float(base.grads[name].reshape(-1)[flat_index])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        errors[name] = max(errors.get(name, 0.0), error)
        checked += 1

    worst = max(errors, key=errors.get) if errors else ""
    report = GradCheckReport(
        max(errors.values(), default=0.0), checked, skipped, worst, errors
    )
    logger.info(
        f"Gradient check: {checked} coordinates, {skipped} skipped, "
        f"max relative error {report.max_relative_error:.3e} ({worst})"
    )
    return report


def _pattern(model: EFCNModel, images: np.ndarray) -> T.List[np.ndarray]:
    _, trace = model.backbone.forward(images)
    return trace.pattern()


def _same_pattern(a: T.List[np.ndarray], b: T.List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _sample_coordinates(
    params: T.Mapping[str, np.ndarray], samples: int, rng: np.random.Generator
) -> T.List[T.Tuple[str, int]]:
    """At least one coordinate per array, the rest uniformly over all coordinates."""
    names = sorted(params)
    sizes = np.array([params[name].size for name in names])
    total = int(sizes.sum())
    chosen = {(name, int(rng.integers(params[name].size))) for name in names}
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    wanted = min(samples, total)
    for flat in rng.permutation(total):
        if len(chosen) >= wanted:
            break
        array = int(np.searchsorted(offsets, flat, side="right") - 1)
        chosen.add((names[array], int(flat - offsets[array])))
    return sorted(chosen)
