"""Output heads mapping ``(B, H, W, P)`` features to pignistic probabilities.

``EvidentialHead`` is the Dempster-Shafer layer; its native output are the masses
``(B, H, W, M + 1)``. ``ProbabilisticHead`` is the softmax baseline whose native
output is the probability map itself.
"""

import logging
import typing as T

import numpy as np
from scipy.special import softmax

from .belief import pignistic_arrays
from .ds_layer import (
    DsDiagnostics,
    DsForwardTrace,
    PrototypeBank,
    ds_backward_batch,
    ds_forward_batch,
    init_bank,
)
from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

HEAD_KINDS = ("evidential", "probabilistic")


class HeadCache(T.NamedTuple):
    features: np.ndarray
    output: np.ndarray
    ds_trace: T.Optional[DsForwardTrace] = None


class EvidentialHead:
    kind = "evidential"
    prefix = "ds."

    def __init__(self, bank: PrototypeBank):
        self.bank = bank
        self.diagnostics = DsDiagnostics()

    @classmethod
    def initialize(
        cls, n: int, P: int, M: int, rng: T.Optional[np.random.Generator] = None
    ) -> "EvidentialHead":
        return cls(init_bank(n, P, M, rng))

    @property
    def M(self) -> int:
        return self.bank.M

    def parameters(self) -> T.Dict[str, np.ndarray]:
        return {self.prefix + name: array for name, array in self.bank.arrays().items()}

    def forward(
        self, features: np.ndarray
    ) -> T.Tuple[np.ndarray, np.ndarray, HeadCache]:
        """Returns ``(betp, masses, cache)`` with leading axes of ``features``."""
        leading = features.shape[:-1]
        flat = np.asarray(features, dtype=np.float64).reshape(-1, features.shape[-1])
        masses, trace = ds_forward_batch(flat, self.bank, self.diagnostics)
        betp = pignistic_arrays(masses)
        return (
            betp.reshape(leading + (self.M,)),
            masses.reshape(leading + (self.M + 1,)),
            HeadCache(flat, masses, trace),
        )

    def backward(
        self, grad_masses: np.ndarray, cache: HeadCache
    ) -> T.Tuple[T.Dict[str, np.ndarray], np.ndarray]:
        """Gradient w.r.t. the masses to parameter and feature gradients."""
        leading = grad_masses.shape[:-1]
        grad_bank, grad_features = ds_backward_batch(
            grad_masses.reshape(-1, self.M + 1), cache.ds_trace, cache.features, self.bank
        )
        grads = {
            self.prefix + name: array for name, array in grad_bank.arrays().items()
        }
        return grads, grad_features.reshape(leading + (self.bank.P,))


class ProbabilisticHead:
    """1x1 linear projection followed by a softmax over the classes."""

    kind = "probabilistic"
    prefix = "head."

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.array(weights, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"Projection {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @classmethod
    def initialize(
        cls, P: int, M: int, rng: T.Optional[np.random.Generator] = None
    ) -> "ProbabilisticHead":
        rng = rng if rng is not None else np.random.default_rng()
        return cls(rng.normal(0.0, 1.0 / np.sqrt(P), size=(P, M)), np.zeros(M))

    @property
    def M(self) -> int:
        return self.weights.shape[1]

    def parameters(self) -> T.Dict[str, np.ndarray]:
        return {self.prefix + "weights": self.weights, self.prefix + "bias": self.bias}

    def forward(
        self, features: np.ndarray
    ) -> T.Tuple[np.ndarray, None, HeadCache]:
        leading = features.shape[:-1]
        flat = np.asarray(features, dtype=np.float64).reshape(-1, features.shape[-1])
        probs = softmax(flat @ self.weights + self.bias, axis=1)
        return probs.reshape(leading + (self.M,)), None, HeadCache(flat, probs)

    def backward(
        self, grad_betp: np.ndarray, cache: HeadCache
    ) -> T.Tuple[T.Dict[str, np.ndarray], np.ndarray]:
        leading = grad_betp.shape[:-1]
        grad = grad_betp.reshape(-1, self.M)
        probs = cache.output
        grad_logits = probs * (grad - np.sum(grad * probs, axis=1, keepdims=True))
        grads = {
            self.prefix + "weights": cache.features.T @ grad_logits,
            self.prefix + "bias": grad_logits.sum(axis=0),
        }
        grad_features = grad_logits @ self.weights.T
        return grads, grad_features.reshape(leading + (self.weights.shape[0],))


Head = T.Union[EvidentialHead, ProbabilisticHead]


def head_from_arrays(kind: str, arrays: T.Mapping[str, np.ndarray]) -> Head:
    if kind == EvidentialHead.kind:
        prefix = EvidentialHead.prefix
        return EvidentialHead(
            PrototypeBank(
                **{name: arrays[prefix + name] for name in PrototypeBank.FIELDS}
            )
        )
    if kind == ProbabilisticHead.kind:
        prefix = ProbabilisticHead.prefix
        return ProbabilisticHead(arrays[prefix + "weights"], arrays[prefix + "bias"])
    raise ConfigurationError(f"Unknown head `{kind}` (expected one of {HEAD_KINDS})")
