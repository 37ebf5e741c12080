"""Run configuration loaded from a JSON document.

Every section is optional and falls back to the defaults below. Unknown keys at any
level are rejected with the dotted path of the offending key.
"""

import dataclasses
import json
import logging
import typing as T
from pathlib import Path

import numpy as np

from .backbone import Architecture, LayerDef, SkipDef
from .constants import (
    DEFAULT_BOUNDARY_WIDTH,
    DEFAULT_CALIBRATION_BINS,
    DEFAULT_GAMMA,
    DEFAULT_GAMMA_GRID,
    DEFAULT_NOISE_SIGMA,
    DEFAULT_PROTOTYPES_PER_CLASS,
)
from .errors import ConfigurationError, EFCNError
from .frame import ClassSet, Frame
from .heads import HEAD_KINDS
from .training import TrainConfig
from .utility import MAX_GAMMA, MIN_GAMMA

logger = logging.getLogger(__name__)

ARCHITECTURE_PRESETS = ("default", "skip", "custom")
DTYPES = ("float32", "float64")


@dataclasses.dataclass
class FrameConfig:
    classes: T.List[str] = dataclasses.field(
        default_factory=lambda: ["background", "c1", "c2"]
    )

    def validate(self):
        Frame(self.classes)


@dataclasses.dataclass
class ArchitectureConfig:
    preset: str = "default"
    input_channels: int = 3
    feature_dim: int = 16
    layers: T.List[T.Dict[str, T.Any]] = dataclasses.field(default_factory=list)
    skip: T.Optional[T.List[int]] = None

    def validate(self):
        if self.preset not in ARCHITECTURE_PRESETS:
            raise ConfigurationError(
                f"Unknown architecture preset `{self.preset}` "
                f"(expected one of {ARCHITECTURE_PRESETS})"
            )
        if self.preset != "custom" and (self.layers or self.skip):
            raise ConfigurationError("Layers and skip need preset `custom`")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be positive")
        self.build()

    def build(self) -> Architecture:
        if self.preset == "default":
            return Architecture.default(self.input_channels, self.feature_dim)
        if self.preset == "skip":
            return Architecture.with_skip(self.input_channels, self.feature_dim)
        try:
            layers = [LayerDef(**layer) for layer in self.layers]
        except TypeError as err:
            raise ConfigurationError(f"Invalid layer description: {err}") from err
        skip = SkipDef(*self.skip) if self.skip is not None else None
        return Architecture(self.input_channels, layers, skip)


@dataclasses.dataclass
class ActsConfig:
    policy: str = "soft_labels"
    soft_labels: T.List[str] = dataclasses.field(default_factory=list)

    def validate(self):
        if self.policy not in ("soft_labels", "all") and not self.policy.startswith(
            "max_cardinality:"
        ):
            raise ConfigurationError(f"Unknown act policy `{self.policy}`")


@dataclasses.dataclass
class UtilityConfig:
    gamma: float = DEFAULT_GAMMA
    base: T.Optional[T.List[T.List[float]]] = None

    def validate(self):
        if not MIN_GAMMA <= self.gamma <= MAX_GAMMA:
            raise ConfigurationError(
                f"gamma must lie in [{MIN_GAMMA}, {MAX_GAMMA}], got {self.gamma}"
            )
        if self.base is not None:
            base = np.asarray(self.base, dtype=np.float64)
            if base.ndim != 2 or base.shape[0] != base.shape[1]:
                raise ConfigurationError("Base utilities must be a square matrix")
            if np.any(base < 0) or np.any(base > 1):
                raise ConfigurationError("Base utilities must lie in [0, 1]")


@dataclasses.dataclass
class DsLayerConfig:
    head: str = "evidential"
    prototypes_per_class: int = DEFAULT_PROTOTYPES_PER_CLASS
    prototypes: T.Optional[int] = None

    def validate(self):
        if self.head not in HEAD_KINDS:
            raise ConfigurationError(
                f"Unknown head `{self.head}` (expected one of {HEAD_KINDS})"
            )
        if self.prototypes_per_class < 1:
            raise ConfigurationError("prototypes_per_class must be positive")
        if self.prototypes is not None and self.prototypes < 1:
            raise ConfigurationError("prototypes must be positive")

    def count(self, M: int) -> int:
        return self.prototypes or self.prototypes_per_class * M


@dataclasses.dataclass
class TrainingConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    dtype: str = "float32"

    def validate(self):
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {DTYPES}")
        # TrainConfig owns the remaining checks
        TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            momentum=self.momentum,
        )


@dataclasses.dataclass
class MetricsConfig:
    bins: int = DEFAULT_CALIBRATION_BINS
    gamma_grid: T.List[float] = dataclasses.field(
        default_factory=lambda: list(DEFAULT_GAMMA_GRID)
    )

    def validate(self):
        if self.bins < 1:
            raise ConfigurationError("bins must be positive")
        if not self.gamma_grid:
            raise ConfigurationError("gamma_grid must not be empty")
        for gamma in self.gamma_grid:
            if not MIN_GAMMA <= gamma <= MAX_GAMMA:
                raise ConfigurationError(f"gamma_grid value {gamma} out of range")


@dataclasses.dataclass
class DataConfig:
    count: int = 800
    size: T.List[int] = dataclasses.field(default_factory=lambda: [32, 32])
    boundary_width: int = DEFAULT_BOUNDARY_WIDTH
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    unknown_classes: int = 0
    unknown_probability: float = 0.5
    split: T.List[float] = dataclasses.field(default_factory=lambda: [0.5, 0.0, 0.5])

    def validate(self):
        if self.count < 1:
            raise ConfigurationError("count must be positive")
        if len(self.size) != 2 or min(self.size) < 1:
            raise ConfigurationError(f"size must be [height, width], got {self.size}")
        if self.boundary_width < 0:
            raise ConfigurationError("boundary_width must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if not 0.0 <= self.unknown_probability <= 1.0:
            raise ConfigurationError("unknown_probability must lie in [0, 1]")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigurationError(f"Invalid split {self.split}")


@dataclasses.dataclass
class PathsConfig:
    dataset: str = "dataset"
    checkpoint: str = "model.efcn"
    output: str = "output"

    def validate(self):
        for field in dataclasses.fields(self):
            if not getattr(self, field.name):
                raise ConfigurationError(f"paths.{field.name} must not be empty")


_SECTIONS: T.Dict[str, T.Type] = {
    "frame": FrameConfig,
    "architecture": ArchitectureConfig,
    "acts": ActsConfig,
    "utility": UtilityConfig,
    "ds_layer": DsLayerConfig,
    "training": TrainingConfig,
    "metrics": MetricsConfig,
    "data": DataConfig,
    "paths": PathsConfig,
}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    frame: FrameConfig = dataclasses.field(default_factory=FrameConfig)
    architecture: ArchitectureConfig = dataclasses.field(
        default_factory=ArchitectureConfig
    )
    acts: ActsConfig = dataclasses.field(default_factory=ActsConfig)
    utility: UtilityConfig = dataclasses.field(default_factory=UtilityConfig)
    ds_layer: DsLayerConfig = dataclasses.field(default_factory=DsLayerConfig)
    training: TrainingConfig = dataclasses.field(default_factory=TrainingConfig)
    metrics: MetricsConfig = dataclasses.field(default_factory=MetricsConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)

    @classmethod
    def from_mapping(cls, mapping: T.Mapping[str, T.Any]) -> "RunConfig":
        if not isinstance(mapping, dict):
            raise ConfigurationError("The configuration must be a JSON object")
        _reject_unknown(mapping, {f.name for f in dataclasses.fields(cls)}, "")
        kwargs: T.Dict[str, T.Any] = {}
        for key, value in mapping.items():
            if key in _SECTIONS:
                kwargs[key] = _section_from_mapping(_SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        config = cls(**kwargs)
        config.validate()
        return config

    def validate(self):
        seed = self.seed
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        for name in _SECTIONS:
            section = getattr(self, name)
            try:
                section.validate()
            except EFCNError as err:
                raise ConfigurationError(f"{name}: {err}") from err
        M = self.build_frame().M
        if self.utility.base is not None and len(self.utility.base) != M:
            raise ConfigurationError(
                f"utility.base must be {M}x{M} for the configured frame"
            )
        try:
            self.extra_soft_labels()
        except EFCNError as err:
            raise ConfigurationError(f"acts: {err}") from err

    def to_mapping(self) -> T.Dict[str, T.Any]:
        return dataclasses.asdict(self)

    def build_frame(self) -> Frame:
        return Frame(self.frame.classes)

    def build_architecture(self) -> Architecture:
        return self.architecture.build()

    def extra_soft_labels(self) -> T.List[ClassSet]:
        frame = self.build_frame()
        return [ClassSet.parse(token, frame) for token in self.acts.soft_labels]

    def base_utilities(self) -> T.Optional[np.ndarray]:
        if self.utility.base is None:
            return None
        return np.asarray(self.utility.base, dtype=np.float64)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.training.learning_rate,
            epochs=self.training.epochs,
            batch_size=self.training.batch_size,
            gamma=self.utility.gamma,
            seed=self.seed,
            optimizer=self.training.optimizer,
            momentum=self.training.momentum,
        )


def _reject_unknown(mapping: T.Mapping[str, T.Any], known: T.Set[str], prefix: str):
    for key in mapping:
        if key not in known:
            dotted = f"{prefix}.{key}" if prefix else key
            raise ConfigurationError(f"Unknown configuration key `{dotted}`")


def _section_from_mapping(section: T.Type, value: T.Any, prefix: str):
    if not isinstance(value, dict):
        raise ConfigurationError(f"Configuration section `{prefix}` must be an object")
    _reject_unknown(value, {f.name for f in dataclasses.fields(section)}, prefix)
    try:
        return section(**value)
    except TypeError as err:
        raise ConfigurationError(f"Invalid section `{prefix}`: {err}") from err


def load_config(path: T.Optional[T.Union[str, Path]]) -> RunConfig:
    """Load a run configuration; ``None`` gives the defaults."""
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    path = Path(path)
    try:
        mapping = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"Invalid JSON in {path}: {err}") from err
    logger.debug(f"Loaded configuration {path}")
    return RunConfig.from_mapping(mapping)
