import itertools
import logging
import typing as T

import numpy as np
from sortedcontainers import SortedList

from .constants import MAX_CLASSES, MAX_ORACLE_CLASSES
from .errors import ConfigurationError, InvalidLabelError

logger = logging.getLogger(__name__)

OMEGA_TOKEN = "omega"


class ClassSet:
    """Subset of the frame of discernment, stored as a bit mask (bit j = class j)."""

    __slots__ = ("bits",)

    def __init__(self, bits: int):
        bits = int(bits)
        if bits < 0:
            raise InvalidLabelError(f"Negative bit mask: {bits}")
        self.bits = bits

    @classmethod
    def from_indices(cls, indices: T.Iterable[int]) -> "ClassSet":
        bits = 0
        for index in indices:
            bits |= 1 << int(index)
        return cls(bits)

    @classmethod
    def parse(cls, token: str, frame: "Frame") -> "ClassSet":
        """Parse ``omega``, ``name+name`` or 1-based indices such as ``1+3``."""
        token = token.strip()
        if token.lower() in (OMEGA_TOKEN, "Ω"):
            return frame.omega
        indices = []
        for part in token.split("+"):
            part = part.strip()
            if part in frame.names:
                indices.append(frame.index(part))
            elif part.isdigit() and 1 <= int(part) <= frame.M:
                indices.append(int(part) - 1)
            else:
                raise InvalidLabelError(f"Unknown class `{part}` in `{token}`")
        return frame.validate(cls.from_indices(indices))

    def indices(self) -> T.Tuple[int, ...]:
        bits = self.bits
        return tuple(j for j in range(bits.bit_length()) if (bits >> j) & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    @property
    def cardinality(self) -> int:
        return len(self)

    @property
    def is_empty(self) -> bool:
        return self.bits == 0

    @property
    def sort_key(self) -> T.Tuple[int, int]:
        # canonical order: precise sets first, then by bit value
        return len(self), self.bits

    def __and__(self, other: "ClassSet") -> "ClassSet":
        return ClassSet(self.bits & other.bits)

    def __or__(self, other: "ClassSet") -> "ClassSet":
        return ClassSet(self.bits | other.bits)

    def __contains__(self, index: int) -> bool:
        return bool((self.bits >> int(index)) & 1)

    def issubset(self, other: "ClassSet") -> bool:
        return self.bits & ~other.bits == 0

    def intersects(self, other: "ClassSet") -> bool:
        return self.bits & other.bits != 0

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassSet) and self.bits == other.bits

    def __hash__(self) -> int:
        return hash(self.bits)

    def __repr__(self) -> str:
        return f"ClassSet({self.indices()})"

    def describe(self, frame: "Frame") -> str:
        if self == frame.omega:
            return OMEGA_TOKEN
        return "+".join(frame.names[j] for j in self.indices())


class Frame:
    """Frame of discernment: ``M`` mutually exclusive named classes."""

    __slots__ = ("names", "_index")

    def __init__(self, names: T.Sequence[str]):
        names = tuple(str(name) for name in names)
        if len(names) < 2:
            raise ConfigurationError(f"A frame needs at least 2 classes, got {names}")
        if len(names) > MAX_CLASSES:
            raise ConfigurationError(
                f"At most {MAX_CLASSES} classes fit a bit mask, got {len(names)}"
            )
        if any(not name for name in names):
            raise ConfigurationError("Class names must be non-empty")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Class names must be unique: {names}")
        if OMEGA_TOKEN in (name.lower() for name in names):
            raise ConfigurationError(f"`{OMEGA_TOKEN}` is reserved for the whole frame")
        self.names = names
        self._index = {name: j for j, name in enumerate(names)}

    @classmethod
    def with_size(cls, M: int) -> "Frame":
        return cls([f"c{j + 1}" for j in range(M)])

    @property
    def M(self) -> int:
        return len(self.names)

    @property
    def omega(self) -> ClassSet:
        return ClassSet((1 << self.M) - 1)

    def singleton(self, j: int) -> ClassSet:
        return ClassSet(1 << j)

    def singletons(self) -> T.List[ClassSet]:
        return [self.singleton(j) for j in range(self.M)]

    def index(self, name: str) -> int:
        return self._index[name]

    def validate(self, class_set: ClassSet) -> ClassSet:
        if class_set.is_empty:
            raise InvalidLabelError("The empty set is not a valid act or label")
        if class_set.bits >> self.M:
            raise InvalidLabelError(
                f"{class_set} has classes outside a frame of {self.M} classes"
            )
        return class_set

    def __eq__(self, other) -> bool:
        return isinstance(other, Frame) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"Frame({list(self.names)})"


class ActList:
    """Ordered, duplicate-free list of acts f_A, one per class set A."""

    __slots__ = ("frame", "acts", "_position", "_bits", "_membership")

    def __init__(self, frame: Frame, acts: T.Iterable[ClassSet]):
        self.frame = frame
        self.acts = tuple(frame.validate(act) for act in acts)
        self._position = {act: i for i, act in enumerate(self.acts)}
        if len(self._position) != len(self.acts):
            raise InvalidLabelError("Duplicate acts")
        missing = [s for s in frame.singletons() + [frame.omega] if s not in self]
        if missing:
            raise InvalidLabelError(f"Act list lacks required acts {missing}")
        self._bits = np.array([act.bits for act in self.acts], dtype=np.uint64)
        self._membership = membership(self._bits, frame.M)

    def __len__(self) -> int:
        return len(self.acts)

    def __iter__(self) -> T.Iterator[ClassSet]:
        return iter(self.acts)

    def __getitem__(self, i: int) -> ClassSet:
        return self.acts[i]

    def __contains__(self, act: ClassSet) -> bool:
        return act in self._position

    def index(self, act: ClassSet) -> int:
        return self._position[act]

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def membership(self) -> np.ndarray:
        """Boolean matrix (|acts|, M): True where class j belongs to act A."""
        return self._membership

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActList)
            and self.frame == other.frame
            and self.acts == other.acts
        )

    def describe(self) -> T.List[str]:
        return [act.describe(self.frame) for act in self.acts]


def membership(bits: np.ndarray, M: int) -> np.ndarray:
    """Expand bit masks of any shape to a boolean array with a trailing class axis."""
    bits = np.asarray(bits, dtype=np.uint64)
    shifts = np.arange(M, dtype=np.uint64)
    return ((bits[..., np.newaxis] >> shifts) & np.uint64(1)).astype(bool)


def build_act_list(frame: Frame, soft_labels: T.Iterable[ClassSet] = ()) -> ActList:
    """Singletons, then soft labels by (cardinality, bits), then Ω."""
    ordered = SortedList(key=lambda class_set: class_set.sort_key)
    seen = set()
    for class_set in itertools.chain(frame.singletons(), soft_labels, [frame.omega]):
        frame.validate(class_set)
        if class_set in seen:
            continue
        seen.add(class_set)
        ordered.add(class_set)
    return ActList(frame, ordered)


def enumerate_subsets(frame: Frame, max_cardinality: int) -> T.List[ClassSet]:
    if frame.M > MAX_ORACLE_CLASSES:
        raise ConfigurationError(
            f"Enumerating subsets is limited to {MAX_ORACLE_CLASSES} classes"
        )
    max_cardinality = min(int(max_cardinality), frame.M)
    return [
        ClassSet.from_indices(combination)
        for k in range(1, max_cardinality + 1)
        for combination in itertools.combinations(range(frame.M), k)
    ]


def act_list_for_policy(
    frame: Frame, policy: str, soft_labels: T.Iterable[ClassSet] = ()
) -> ActList:
    """Resolve an act policy: ``soft_labels``, ``max_cardinality:<k>`` or ``all``."""
    soft_labels = list(soft_labels)
    if policy == "soft_labels":
        return build_act_list(frame, soft_labels)
    if policy == "all":
        if frame.M > 12:
            raise ConfigurationError("Policy `all` is limited to 12 classes")
        return build_act_list(frame, enumerate_subsets(frame, frame.M))
    if policy.startswith("max_cardinality:"):
        try:
            k = int(policy.split(":", 1)[1])
        except ValueError as err:
            raise ConfigurationError(f"Invalid act policy `{policy}`") from err
        if k < 1:
            raise ConfigurationError(f"Invalid act policy `{policy}`")
        return build_act_list(frame, enumerate_subsets(frame, k) + soft_labels)
    raise ConfigurationError(f"Unknown act policy `{policy}`")
