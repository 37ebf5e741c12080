"""Dempster-Shafer layer: distances to prototypes turned into combined mass functions.

For prototype ``l`` with reliability ``α_l = expit(ξ_l)``, scale ``η_l`` and class
memberships ``v_l = δ_l² / Σ δ_l²``, an input ``x`` at Euclidean distance ``d_l``
has similarity ``s_l = α_l exp(-(η_l d_l)²)`` and induces the simple mass function
``m_l({ω_j}) = v_lj s_l``, ``m_l(Ω) = 1 - s_l``. The ``n`` mass functions are
combined conjunctively in unnormalized form and normalized once at the end.

All batch functions take features of shape ``(N, P)`` and work in float64.
"""

import logging
import typing as T

import numpy as np
from scipy.special import expit

from .belief import MassVector, combine_arrays, normalize_arrays
from .errors import ContractViolation, ShapeError, TrainingDivergenceError

logger = logging.getLogger(__name__)

_MIN_MEMBERSHIP_NORM = 1e-6


class PrototypeBank:
    """Trainable DS-layer parameters; also used to hold their gradients."""

    __slots__ = ("prototypes", "eta", "xi", "delta")

    FIELDS = ("prototypes", "eta", "xi", "delta")

    def __init__(self, prototypes, eta, xi, delta):
        self.prototypes = np.array(prototypes, dtype=np.float64)
        self.eta = np.array(eta, dtype=np.float64)
        self.xi = np.array(xi, dtype=np.float64)
        self.delta = np.array(delta, dtype=np.float64)
        n = self.prototypes.shape[0]
        if (
            self.prototypes.ndim != 2
            or self.eta.shape != (n,)
            or self.xi.shape != (n,)
            or self.delta.ndim != 2
            or self.delta.shape[0] != n
        ):
            raise ShapeError(
                f"Inconsistent prototype bank shapes: prototypes "
                f"{self.prototypes.shape}, eta {self.eta.shape}, xi {self.xi.shape}, "
                f"delta {self.delta.shape}"
            )

    @property
    def n(self) -> int:
        return self.prototypes.shape[0]

    @property
    def P(self) -> int:
        return self.prototypes.shape[1]

    @property
    def M(self) -> int:
        return self.delta.shape[1]

    @property
    def alpha(self) -> np.ndarray:
        return expit(self.xi)

    @property
    def memberships(self) -> np.ndarray:
        squared = self.delta**2
        return squared / squared.sum(axis=1, keepdims=True)

    def arrays(self) -> T.Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def zeros_like(self) -> "PrototypeBank":
        return PrototypeBank(
            **{name: np.zeros_like(array) for name, array in self.arrays().items()}
        )

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(**self.arrays())

    def check_finite(self):
        for name, array in self.arrays().items():
            bad = np.argwhere(~np.isfinite(array))
            if bad.size:
                raise TrainingDivergenceError(
                    f"Non-finite DS-layer parameter `{name}` at index "
                    f"{tuple(int(i) for i in bad[0])}"
                )
        norms = (self.delta**2).sum(axis=1)
        if np.any(norms <= 0.0):
            raise TrainingDivergenceError(
                f"Prototype {int(np.argmin(norms))} lost all class memberships"
            )


class DsForwardTrace:
    """Per-pixel quantities cached by the forward pass for the backward pass."""

    __slots__ = (
        "distances",
        "exp_terms",
        "similarities",
        "prototype_masses",
        "partial_combinations",
        "unnormalized_total",
        "masses",
        "degenerate",
    )

    def __init__(
        self,
        distances,
        exp_terms,
        similarities,
        prototype_masses,
        partial_combinations,
        unnormalized_total,
        masses,
        degenerate,
    ):
        self.distances = distances
        self.exp_terms = exp_terms
        self.similarities = similarities
        self.prototype_masses = prototype_masses
        self.partial_combinations = partial_combinations
        self.unnormalized_total = unnormalized_total
        self.masses = masses
        self.degenerate = degenerate

    @property
    def shape(self) -> T.Tuple[int, int, int]:
        N, n, M_plus_one = self.prototype_masses.shape
        return N, n, M_plus_one - 1


class DsDiagnostics:
    """Counts pixels whose combined evidence had zero total mass."""

    __slots__ = ("degenerate_pixels",)

    def __init__(self):
        self.degenerate_pixels = 0

    def reset(self):
        self.degenerate_pixels = 0


def init_bank(
    n: int, P: int, M: int, rng: T.Optional[np.random.Generator] = None
) -> PrototypeBank:
    rng = rng if rng is not None else np.random.default_rng()
    prototypes = rng.normal(0.0, 1.0 / np.sqrt(P), size=(n, P))
    delta = rng.normal(0.0, 1.0, size=(n, M))
    for l in range(n):
        while (delta[l] ** 2).sum() < _MIN_MEMBERSHIP_NORM:
            delta[l] = rng.normal(0.0, 1.0, size=M)
    return PrototypeBank(
        prototypes=prototypes,
        eta=np.full(n, 0.5),
        xi=np.zeros(n),
        delta=delta,
    )


def ds_forward_batch(
    features: np.ndarray,
    bank: PrototypeBank,
    diagnostics: T.Optional[DsDiagnostics] = None,
) -> T.Tuple[np.ndarray, DsForwardTrace]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != bank.P:
        raise ShapeError(
            f"Expected features of shape (N, {bank.P}), got {features.shape}"
        )
    bank.check_finite()
    if not np.all(np.isfinite(features)):
        raise TrainingDivergenceError("Non-finite features entering the DS layer")

    diff = features[:, np.newaxis, :] - bank.prototypes[np.newaxis, :, :]
    distances = np.sqrt(np.einsum("nlp,nlp->nl", diff, diff))
    exp_terms = np.exp(-((bank.eta * distances) ** 2))
    similarities = bank.alpha * exp_terms

    memberships = bank.memberships
    prototype_masses = np.concatenate(
        [
            memberships[np.newaxis, :, :] * similarities[:, :, np.newaxis],
            1.0 - similarities[:, :, np.newaxis],
        ],
        axis=2,
    )

    partial_combinations = np.empty_like(prototype_masses)
    mu = prototype_masses[:, 0, :]
    partial_combinations[:, 0, :] = mu
    for l in range(1, bank.n):
        mu = combine_arrays(mu, prototype_masses[:, l, :])
        partial_combinations[:, l, :] = mu

    masses, degenerate = normalize_arrays(mu)
    if np.any(degenerate):
        count = int(degenerate.sum())
        logger.warning(f"{count} pixel(s) with zero total mass replaced by vacuous")
        if diagnostics is not None:
            diagnostics.degenerate_pixels += count

    trace = DsForwardTrace(
        distances=distances,
        exp_terms=exp_terms,
        similarities=similarities,
        prototype_masses=prototype_masses,
        partial_combinations=partial_combinations,
        unnormalized_total=mu,
        masses=masses,
        degenerate=degenerate,
    )
    return masses, trace


def ds_backward_batch(
    grad_out: np.ndarray,
    trace: DsForwardTrace,
    features: np.ndarray,
    bank: PrototypeBank,
) -> T.Tuple[PrototypeBank, np.ndarray]:
    """Reverse accumulation through normalization and the combination recursion.

    Parameter gradients are summed over the ``N`` pixels.
    """
    features = np.asarray(features, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    N, n, M = trace.shape
    if (
        features.shape != (N, bank.P)
        or grad_out.shape != (N, M + 1)
        or n != bank.n
        or M != bank.M
    ):
        raise ContractViolation(
            f"Stale DS-layer trace: trace (N={N}, n={n}, M={M}), features "
            f"{features.shape}, grad_out {grad_out.shape}, bank (n={bank.n}, "
            f"M={bank.M})"
        )

    # through m = mu / Z
    total = trace.unnormalized_total.sum(axis=1, keepdims=True)
    safe_total = np.where(total > 0.0, total, 1.0)
    grad_mu = (
        grad_out - np.sum(grad_out * trace.masses, axis=1, keepdims=True)
    ) / safe_total
    grad_mu[trace.degenerate] = 0.0

    # through mu_l = mu_{l-1} (+) m_l
    grad_masses = np.empty_like(trace.prototype_masses)
    for l in range(n - 1, 0, -1):
        previous = trace.partial_combinations[:, l - 1, :]
        current = trace.prototype_masses[:, l, :]
        g_singletons, g_omega = grad_mu[:, :M], grad_mu[:, M]

        grad_masses[:, l, :M] = g_singletons * (
            previous[:, :M] + previous[:, M:]
        )
        grad_masses[:, l, M] = (
            np.sum(g_singletons * previous[:, :M], axis=1) + g_omega * previous[:, M]
        )

        next_singletons = g_singletons * (current[:, :M] + current[:, M:])
        next_omega = (
            np.sum(g_singletons * current[:, :M], axis=1) + g_omega * current[:, M]
        )
        grad_mu = np.concatenate([next_singletons, next_omega[:, np.newaxis]], axis=1)
    grad_masses[:, 0, :] = grad_mu

    # through m_l = (v_l s_l, 1 - s_l)
    memberships = bank.memberships
    similarities = trace.similarities
    grad_similarities = (
        np.einsum("nlj,lj->nl", grad_masses[:, :, :M], memberships)
        - grad_masses[:, :, M]
    )
    grad_memberships = np.einsum(
        "nlj,nl->lj", grad_masses[:, :, :M], similarities
    )

    # through s_l = expit(xi_l) exp(-(eta_l d_l)^2)
    alpha = bank.alpha
    grad_alpha = np.sum(grad_similarities * trace.exp_terms, axis=0)
    grad_xi = grad_alpha * alpha * (1.0 - alpha)

    weighted = grad_similarities * similarities
    grad_eta = np.sum(weighted * (-2.0 * bank.eta * trace.distances**2), axis=0)

    # d s_l / d x = -2 eta_l^2 s_l (x - p_l)
    coefficients = weighted * (-2.0 * bank.eta**2)
    grad_features = (
        coefficients.sum(axis=1, keepdims=True) * features
        - coefficients @ bank.prototypes
    )
    grad_prototypes = -(
        coefficients.T @ features
        - coefficients.sum(axis=0)[:, np.newaxis] * bank.prototypes
    )

    # through v_lj = delta_lj^2 / sum_j' delta_lj'^2
    squared_norm = np.sum(bank.delta**2, axis=1, keepdims=True)
    grad_delta = (
        2.0
        * bank.delta
        / squared_norm
        * (
            grad_memberships
            - np.sum(grad_memberships * memberships, axis=1, keepdims=True)
        )
    )

    grad_bank = PrototypeBank(
        prototypes=grad_prototypes, eta=grad_eta, xi=grad_xi, delta=grad_delta
    )
    return grad_bank, grad_features


def ds_forward(
    x: np.ndarray,
    bank: PrototypeBank,
    diagnostics: T.Optional[DsDiagnostics] = None,
) -> T.Tuple[MassVector, DsForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"Expected a feature vector, got shape {x.shape}")
    masses, trace = ds_forward_batch(x[np.newaxis, :], bank, diagnostics)
    return MassVector.from_array(masses[0]), trace


def ds_backward(
    grad_out: np.ndarray,
    trace: DsForwardTrace,
    x: np.ndarray,
    bank: PrototypeBank,
) -> T.Tuple[PrototypeBank, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_bank, grad_x = ds_backward_batch(
        grad_out[np.newaxis, :], trace, x[np.newaxis, :], bank
    )
    return grad_bank, grad_x[0]


def ds_forward_map(
    features: np.ndarray,
    bank: PrototypeBank,
    diagnostics: T.Optional[DsDiagnostics] = None,
) -> np.ndarray:
    """Apply the DS layer to every pixel of an ``(..., H, W, P)`` feature map."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim < 3 or features.shape[-1] != bank.P:
        raise ShapeError(
            f"Expected a feature map (..., H, W, {bank.P}), got {features.shape}"
        )
    masses, _ = ds_forward_batch(features.reshape(-1, bank.P), bank, diagnostics)
    return masses.reshape(features.shape[:-1] + (bank.M + 1,))
