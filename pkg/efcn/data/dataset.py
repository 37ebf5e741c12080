import json
import logging
import typing as T
from pathlib import Path

import numpy as np

from ..constants import UNKNOWN_LABEL
from ..errors import ConfigurationError, FormatError, InvalidLabelError, ShapeError
from ..frame import ClassSet, Frame, membership
from .formats import load_mask, load_tensor, save_mask, save_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class SegSample:
    """Image ``(H, W, C)`` with its label bit masks ``(H, W)``.

    ``novel`` optionally identifies the unknown class of each unknown-labeled pixel
    (0 elsewhere).
    """

    __slots__ = ("image", "labels", "novel")

    def __init__(
        self,
        image: np.ndarray,
        labels: np.ndarray,
        novel: T.Optional[np.ndarray] = None,
    ):
        self.image = np.asarray(image, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint64)
        self.novel = None if novel is None else np.asarray(novel, dtype=np.int64)
        if self.image.ndim != 3 or self.image.shape[:2] != self.labels.shape:
            raise ShapeError(
                f"Image {self.image.shape} and labels {self.labels.shape} do not match"
            )
        if self.novel is not None and self.novel.shape != self.labels.shape:
            raise ShapeError(f"Novelty map {self.novel.shape} does not match labels")


class SegDataset:
    def __init__(
        self,
        frame: Frame,
        samples: T.Sequence[SegSample],
        split: T.Mapping[str, T.Sequence[int]],
    ):
        self.frame = frame
        self.samples = list(samples)
        self.split = {name: [int(i) for i in split.get(name, ())] for name in SPLITS}
        unknown = set(split) - set(SPLITS)
        if unknown:
            raise ConfigurationError(f"Unknown splits {sorted(unknown)}")
        self._validate()

    def _validate(self):
        indices = [i for name in SPLITS for i in self.split[name]]
        if len(indices) != len(set(indices)):
            raise ConfigurationError("Dataset splits overlap")
        if sorted(indices) != list(range(len(self.samples))):
            raise ConfigurationError("Dataset splits do not cover every sample")
        shapes = {sample.image.shape for sample in self.samples}
        if len({shape[2] for shape in shapes}) > 1:
            raise ShapeError(f"Samples have different channel counts: {shapes}")
        for index, sample in enumerate(self.samples):
            if self.frame.M < 64 and np.any(
                sample.labels >> np.uint64(self.frame.M)
            ):
                raise InvalidLabelError(
                    f"Sample {index} has labels outside the frame of {self.frame.M}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str) -> T.List[SegSample]:
        if split not in SPLITS:
            raise ConfigurationError(f"Unknown split `{split}`")
        return [self.samples[i] for i in self.split[split]]

    def images(self, split: str) -> np.ndarray:
        return np.stack([sample.image for sample in self._non_empty(split)])

    def labels(self, split: str) -> np.ndarray:
        return np.stack([sample.labels for sample in self._non_empty(split)])

    def _non_empty(self, split: str) -> T.List[SegSample]:
        samples = self.subset(split)
        if not samples:
            raise ConfigurationError(f"Split `{split}` of the dataset is empty")
        return samples

    def novel(self, split: str) -> T.Optional[np.ndarray]:
        samples = self.subset(split)
        if not samples or all(sample.novel is None for sample in samples):
            return None
        return np.stack(
            [
                sample.novel
                if sample.novel is not None
                else np.zeros(sample.labels.shape, dtype=np.int64)
                for sample in samples
            ]
        )

    def soft_labels(self, split: T.Optional[str] = None) -> T.List[ClassSet]:
        """Multi-class labels present in a split (or the whole dataset)."""
        samples = self.samples if split is None else self.subset(split)
        present = set()
        for sample in samples:
            present.update(np.unique(sample.labels).tolist())
        present.discard(UNKNOWN_LABEL)
        sets = [ClassSet(bits) for bits in present]
        return sorted((s for s in sets if len(s) > 1), key=lambda s: s.sort_key)

    def class_frequencies(self) -> np.ndarray:
        """Fraction of labeled pixels whose label contains each class."""
        counts = np.zeros(self.frame.M)
        total = 0
        for sample in self.samples:
            known = sample.labels[sample.labels != UNKNOWN_LABEL]
            counts += membership(known, self.frame.M).sum(axis=0)
            total += known.size
        return counts / max(total, 1)

    def save(self, directory: T.Union[str, Path]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for index, sample in enumerate(self.samples):
            stem = f"sample_{index:05d}"
            entry = {"image": f"{stem}_image.eftn", "labels": f"{stem}_labels.efmk"}
            save_tensor(directory / entry["image"], sample.image)
            save_mask(directory / entry["labels"], sample.labels, self.frame)
            if sample.novel is not None:
                entry["novel"] = f"{stem}_novel.eftn"
                save_tensor(directory / entry["novel"], sample.novel.astype(np.float64))
            entries.append(entry)
        manifest = {
            "version": MANIFEST_VERSION,
            "frame": list(self.frame.names),
            "samples": entries,
            "split": self.split,
        }
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
        logger.info(f"Wrote {len(self.samples)} samples to {directory}")


def load_dataset(directory: T.Union[str, Path]) -> SegDataset:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"Invalid dataset manifest {path}") from err
    if not isinstance(manifest, dict) or "version" not in manifest:
        raise FormatError(f"Unrecognized dataset manifest {path}")
    if manifest["version"] != MANIFEST_VERSION:
        raise FormatError(
            f"Unexpected manifest version `{manifest['version']}` "
            f"(expected `{MANIFEST_VERSION}`)"
        )
    try:
        frame = Frame(manifest["frame"])
        samples = []
        for entry in manifest["samples"]:
            novel = None
            if "novel" in entry:
                novel = load_tensor(directory / entry["novel"]).astype(np.int64)
            samples.append(
                SegSample(
                    load_tensor(directory / entry["image"]),
                    load_mask(directory / entry["labels"], frame),
                    novel,
                )
            )
        split = manifest["split"]
    except (KeyError, TypeError) as err:
        raise FormatError(f"Incomplete dataset manifest {path}: {err}") from err
    return SegDataset(frame, samples, split)
