import logging
import struct
import typing as T
from pathlib import Path

import msgpack
import numpy as np

from .backbone import Architecture, Backbone, BackboneTrace
from .constants import DEFAULT_PROTOTYPES_PER_CLASS
from .errors import ConfigurationError, FormatError, InvalidLabelError
from .frame import ClassSet, Frame
from .heads import (
    EvidentialHead,
    Head,
    HeadCache,
    ProbabilisticHead,
    head_from_arrays,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EFCN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHI")

BACKBONE_PREFIX = "backbone."


class ModelCache(T.NamedTuple):
    backbone: BackboneTrace
    head: HeadCache


class EFCNModel:
    """Backbone, output head and the soft labels the model was trained with."""

    def __init__(
        self,
        frame: Frame,
        backbone: Backbone,
        head: Head,
        soft_labels: T.Iterable[ClassSet] = (),
    ):
        if head.M != frame.M:
            raise ConfigurationError(
                f"Head predicts {head.M} classes for a frame of {frame.M}"
            )
        self.frame = frame
        self.backbone = backbone
        self.head = head
        self.soft_labels = tuple(sorted(set(soft_labels), key=lambda s: s.sort_key))

    @classmethod
    def initialize(
        cls,
        frame: Frame,
        architecture: T.Optional[Architecture] = None,
        head_kind: str = EvidentialHead.kind,
        n_prototypes: T.Optional[int] = None,
        seed: T.Optional[int] = None,
        dtype=np.float32,
        soft_labels: T.Iterable[ClassSet] = (),
    ) -> "EFCNModel":
        rng = np.random.default_rng(seed)
        architecture = architecture if architecture is not None else Architecture.default()
        backbone = Backbone(architecture, rng=rng, dtype=dtype)
        P = architecture.feature_dim
        if head_kind == EvidentialHead.kind:
            n = n_prototypes or DEFAULT_PROTOTYPES_PER_CLASS * frame.M
            head = EvidentialHead.initialize(n, P, frame.M, rng)
        elif head_kind == ProbabilisticHead.kind:
            head = ProbabilisticHead.initialize(P, frame.M, rng)
        else:
            raise ConfigurationError(f"Unknown head `{head_kind}`")
        logger.debug(
            f"Initialized {head_kind} model: {architecture}, "
            f"{sum(a.size for a in backbone.params.values())} backbone weights"
        )
        return cls(frame, backbone, head, soft_labels)

    @property
    def head_kind(self) -> str:
        return self.head.kind

    def parameters(self) -> T.Dict[str, np.ndarray]:
        """Live references to every trainable array, by name."""
        params = {
            BACKBONE_PREFIX + name: array for name, array in self.backbone.params.items()
        }
        params.update(self.head.parameters())
        return params

    def set_parameters(self, values: T.Mapping[str, np.ndarray]):
        params = self.parameters()
        unknown = set(values) - set(params)
        if unknown:
            raise ConfigurationError(f"Unknown parameters {sorted(unknown)}")
        for name, value in values.items():
            params[name][...] = value

    def forward(
        self, images: np.ndarray
    ) -> T.Tuple[np.ndarray, T.Optional[np.ndarray], ModelCache]:
        """Returns ``(betp, masses, cache)``; ``masses`` is None for the softmax head."""
        features, backbone_trace = self.backbone.forward(images)
        betp, masses, head_cache = self.head.forward(features)
        return betp, masses, ModelCache(backbone_trace, head_cache)

    def backward(
        self, grad_output: np.ndarray, cache: ModelCache
    ) -> T.Dict[str, np.ndarray]:
        """Gradients of every parameter given the gradient w.r.t. the head output."""
        grads, grad_features = self.head.backward(grad_output, cache.head)
        backbone_grads, _ = self.backbone.backward(grad_features, cache.backbone)
        grads.update(
            {BACKBONE_PREFIX + name: grad for name, grad in backbone_grads.items()}
        )
        return grads

    def predict(
        self, images: np.ndarray, batch_size: int = 32
    ) -> T.Tuple[np.ndarray, T.Optional[np.ndarray]]:
        """Pignistic maps ``(B, H, W, M)`` and, for the evidential head, mass maps."""
        images = np.asarray(images)
        betps, masses = [], []
        for start in range(0, images.shape[0], batch_size):
            betp, mass, _ = self.forward(images[start : start + batch_size])
            betps.append(betp)
            masses.append(mass)
        if masses and masses[0] is None:
            return np.concatenate(betps), None
        return np.concatenate(betps), np.concatenate(masses)


def save_checkpoint(path: T.Union[str, Path], model: EFCNModel):
    payload = {
        "version": CHECKPOINT_VERSION,
        "frame": list(model.frame.names),
        "architecture": model.backbone.architecture.to_dict(),
        "dtype": model.backbone.dtype.name,
        "head": model.head_kind,
        "soft_labels": [label.bits for label in model.soft_labels],
        "weights": {
            name: {
                "shape": list(array.shape),
                "data": np.ascontiguousarray(array, dtype="<f8").tobytes(),
            }
            for name, array in model.parameters().items()
        },
    }
    body = msgpack.packb(payload, use_bin_type=True)
    path = Path(path)
    with path.open("wb") as file:
        file.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(body)))
        file.write(body)
    logger.info(f"Wrote checkpoint {path}")


def load_checkpoint(path: T.Union[str, Path]) -> EFCNModel:
    raw = Path(path).read_bytes()
    try:
        magic, version, length = _HEADER.unpack_from(raw)
    except struct.error as err:
        raise FormatError(f"Truncated checkpoint header in {path}") from err
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"Unexpected checkpoint version `{version}` "
            f"(expected `{CHECKPOINT_VERSION}`)"
        )
    body = raw[_HEADER.size :]
    if len(body) != length:
        raise FormatError(f"Checkpoint payload has {len(body)} bytes, expected {length}")
    try:
        payload = msgpack.unpackb(body, raw=False)
    except (msgpack.UnpackException, ValueError) as err:
        raise FormatError(f"Corrupt checkpoint payload in {path}") from err
    _validate_payload(payload)
    try:
        frame = Frame(payload["frame"])
        arrays = {
            name: np.frombuffer(entry["data"], dtype="<f8")
            .reshape(entry["shape"])
            .astype(np.float64)
            for name, entry in payload["weights"].items()
        }
        backbone = Backbone(
            Architecture.from_dict(payload["architecture"]),
            params={
                name[len(BACKBONE_PREFIX) :]: array
                for name, array in arrays.items()
                if name.startswith(BACKBONE_PREFIX)
            },
            dtype=np.dtype(payload["dtype"]),
        )
        head = head_from_arrays(payload["head"], arrays)
        soft_labels = [frame.validate(ClassSet(bits)) for bits in payload["soft_labels"]]
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"Incomplete checkpoint {path}: {err}") from err
    except InvalidLabelError as err:
        raise FormatError(f"Corrupt soft label in {path}: {err}") from err
    return EFCNModel(frame, backbone, head, soft_labels)


def _validate_payload(payload):
    if not isinstance(payload, dict) or "version" not in payload:
        raise FormatError("Unrecognized checkpoint payload")
    if payload["version"] != CHECKPOINT_VERSION:
        raise FormatError(
            f"Unexpected payload version `{payload['version']}` "
            f"(expected `{CHECKPOINT_VERSION}`)"
        )
