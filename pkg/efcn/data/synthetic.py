"""Synthetic scenes: coloured rectangles and discs on a background class.

Class 0 of the frame is the background. Each image holds up to three shapes of
distinct foreground classes; pixels within ``boundary_width`` (Chebyshev distance)
of a different class get the union of the classes around them as a soft label.
Shapes of held-out classes can be injected; their pixels are labeled with the
unknown-class sentinel.
"""

import logging
import typing as T

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..constants import (
    CLASS_COLORS,
    DEFAULT_BOUNDARY_WIDTH,
    DEFAULT_NOISE_SIGMA,
    MAX_SYNTHETIC_CLASSES,
    UNKNOWN_COLORS,
    UNKNOWN_LABEL,
)
from ..errors import ConfigurationError
from ..frame import Frame
from .dataset import SegDataset, SegSample

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 8
MAX_SHAPES = 3


class ShapeDef(T.NamedTuple):
    kind: str
    class_id: int
    center: T.Tuple[float, float]
    extent: T.Tuple[float, float]

    def mask(self, height: int, width: int) -> np.ndarray:
        rows, cols = np.mgrid[0:height, 0:width]
        cy, cx = self.center
        if self.kind == "disc":
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= self.extent[0] ** 2
        hy, hx = self.extent
        return (np.abs(rows - cy) <= hy) & (np.abs(cols - cx) <= hx)


def _random_shape(
    rng: np.random.Generator, class_id: int, height: int, width: int
) -> ShapeDef:
    size = min(height, width)
    center = (rng.uniform(0, height - 1), rng.uniform(0, width - 1))
    if rng.random() < 0.5:
        radius = rng.uniform(size / 8, size / 4)
        return ShapeDef("disc", class_id, center, (radius, radius))
    extent = (rng.uniform(height / 8, height / 4), rng.uniform(width / 8, width / 4))
    return ShapeDef("rect", class_id, center, extent)


def boundary_labels(class_bits: np.ndarray, width: int) -> np.ndarray:
    """OR of the class bits in the ``(2w+1)^2`` neighbourhood of every pixel.

    Unknown pixels (bits 0) keep label 0 and contribute nothing to their neighbours.
    """
    class_bits = np.asarray(class_bits, dtype=np.uint64)
    if width <= 0:
        return class_bits.copy()
    padded = np.pad(class_bits, width, mode="constant", constant_values=0)
    window = 2 * width + 1
    neighbourhood = sliding_window_view(padded, (window, window))
    merged = np.bitwise_or.reduce(
        neighbourhood.reshape(class_bits.shape + (-1,)), axis=-1
    )
    return np.where(class_bits == UNKNOWN_LABEL, np.uint64(UNKNOWN_LABEL), merged)


def render_scene(
    class_map: np.ndarray,
    M: int,
    rng: np.random.Generator,
    noise_sigma: float,
) -> np.ndarray:
    """Colour a class map; ids ``>= M`` are unknown classes."""
    palette = np.array(CLASS_COLORS[:M] + UNKNOWN_COLORS, dtype=np.float64)
    image = palette[class_map] + rng.normal(0.0, noise_sigma, size=class_map.shape + (3,))
    return image.astype(np.float32)


def gen_sample(
    frame: Frame,
    rng: np.random.Generator,
    size: T.Tuple[int, int],
    boundary_width: int,
    noise_sigma: float,
    unknown_classes: int = 0,
    unknown_probability: float = 0.0,
) -> SegSample:
    height, width = size
    M = frame.M
    class_map = np.zeros(size, dtype=np.int64)
    count = int(rng.integers(1, min(MAX_SHAPES, M - 1) + 1))
    classes = rng.choice(np.arange(1, M), size=count, replace=False)
    for class_id in classes:
        shape = _random_shape(rng, int(class_id), height, width)
        class_map[shape.mask(height, width)] = shape.class_id
    if unknown_classes and rng.random() < unknown_probability:
        unknown_id = int(rng.integers(1, unknown_classes + 1))
        shape = _random_shape(rng, M + unknown_id - 1, height, width)
        class_map[shape.mask(height, width)] = shape.class_id

    unknown = class_map >= M
    class_bits = np.where(
        unknown,
        np.uint64(UNKNOWN_LABEL),
        np.left_shift(np.uint64(1), np.minimum(class_map, M - 1).astype(np.uint64)),
    )
    labels = boundary_labels(class_bits, boundary_width)
    image = render_scene(class_map, M, rng, noise_sigma)
    novel = np.where(unknown, class_map - M + 1, 0) if unknown_classes else None
    return SegSample(image, labels, novel)


def split_indices(
    count: int, fractions: T.Sequence[float]
) -> T.Dict[str, T.List[int]]:
    """Consecutive train/val/test blocks with sizes rounded from ``fractions``.

    A positive training fraction always yields at least one training item.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or fractions.sum() <= 0:
        raise ConfigurationError(f"Invalid split fractions {fractions.tolist()}")
    fractions = fractions / fractions.sum()
    n_train = int(round(count * fractions[0]))
    if fractions[0] > 0 and count > 0:
        n_train = max(n_train, 1)
    n_val = min(int(round(count * fractions[1])), count - n_train)
    indices = list(range(count))
    return {
        "train": indices[:n_train],
        "val": indices[n_train : n_train + n_val],
        "test": indices[n_train + n_val :],
    }


def gen_synthetic(
    frame: Frame,
    count: int,
    size: T.Tuple[int, int] = (32, 32),
    seed: int = 0,
    boundary_width: int = DEFAULT_BOUNDARY_WIDTH,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    unknown_classes: int = 0,
    unknown_probability: float = 0.5,
    split: T.Sequence[float] = (0.5, 0.0, 0.5),
    unknown_in: T.Sequence[str] = ("test",),
) -> SegDataset:
    """Generate a dataset; unknown classes are injected only into ``unknown_in`` splits."""
    if frame.M > MAX_SYNTHETIC_CLASSES:
        raise ConfigurationError(
            f"Synthetic scenes support at most {MAX_SYNTHETIC_CLASSES} classes"
        )
    height, width = size
    if min(height, width) < MIN_IMAGE_SIZE:
        raise ConfigurationError(
            f"Shapes do not fit a {height}x{width} image "
            f"(minimum {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE})"
        )
    if count < 1:
        raise ConfigurationError("count must be positive")
    if boundary_width < 0:
        raise ConfigurationError("boundary_width must be non-negative")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative")
    if not 0 <= unknown_classes <= len(UNKNOWN_COLORS):
        raise ConfigurationError(
            f"At most {len(UNKNOWN_COLORS)} unknown classes, got {unknown_classes}"
        )

    rng = np.random.default_rng(seed)
    indices = split_indices(count, split)
    with_unknown = {i for name in unknown_in for i in indices.get(name, ())}
    samples = [
        gen_sample(
            frame,
            rng,
            (height, width),
            boundary_width,
            noise_sigma,
            unknown_classes if i in with_unknown else 0,
            unknown_probability,
        )
        for i in range(count)
    ]
    if unknown_classes:
        # every sample carries a novelty map so the dataset stays uniform
        samples = [
            sample
            if sample.novel is not None
            else SegSample(sample.image, sample.labels, np.zeros(size, dtype=np.int64))
            for sample in samples
        ]
    logger.info(
        f"Generated {count} synthetic {height}x{width} scenes over {frame.M} classes "
        f"(seed {seed}, boundary width {boundary_width})"
    )
    return SegDataset(frame, samples, indices)
