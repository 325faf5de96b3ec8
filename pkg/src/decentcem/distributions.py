"""Sampling distributions used by the CEM family.

Two families are supported: a diagonal Gaussian and a mixture of diagonal
Gaussians. Everything here is a pure function of its arguments; randomness
always comes in through an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp

from .exceptions import EmptyEliteError, ParameterError

_LOG_2PI = np.log(2.0 * np.pi)


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ParameterError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """Gaussian with a diagonal covariance, stored as per-dimension variances."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        variance = _as_vector(self.variance, "variance")
        if variance.shape == (1,) and mean.shape[0] > 1:
            variance = np.full_like(mean, variance[0])
        if mean.shape != variance.shape:
            raise ParameterError(
                f"mean and variance lengths differ: {mean.shape[0]} vs {variance.shape[0]}"
            )
        if np.any(variance < 0):
            raise ParameterError("variance must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def clamp_variance(self, floor: float) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean, np.maximum(self.variance, floor))

    def __eq__(self, other):
        if not isinstance(other, DiagonalGaussian):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.variance, other.variance
        )

    def __repr__(self):
        return f"DiagonalGaussian(mean={self.mean!r}, variance={self.variance!r})"


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted mixture of :class:`DiagonalGaussian` components."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ParameterError("a mixture needs at least one component")
        if not all(isinstance(c, DiagonalGaussian) for c in comps):
            raise ParameterError("mixture components must be DiagonalGaussian")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ParameterError(f"components disagree on dimension: {sorted(dims)}")
        weights = _as_vector(self.weights, "weights")
        if weights.shape[0] != len(comps):
            raise ParameterError("need exactly one weight per component")
        if np.any(weights < 0):
            raise ParameterError("mixture weights must be non-negative")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ParameterError(f"mixture weights sum to {weights.sum()}, not 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_arrays(cls, means, variances, weights) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        variances = np.broadcast_to(np.asarray(variances, dtype=float), means.shape)
        comps = tuple(DiagonalGaussian(m, v) for m, v in zip(means, variances))
        return cls(comps, weights)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([c.variance for c in self.components])

    @property
    def mean(self) -> np.ndarray:
        """Mean of the mixture as a whole."""
        return self.weights @ self.means

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and len(self.components) == len(other.components)
            and all(a == b for a, b in zip(self.components, other.components))
        )

    def __repr__(self):
        return f"GaussianMixture(n_components={self.n_components}, weights={self.weights!r})"


Distribution = Union[DiagonalGaussian, GaussianMixture]


@dataclass(frozen=True, eq=False)
class EliteSet:
    """Top-k samples of a batch together with the value threshold v_th."""

    samples: np.ndarray
    values: np.ndarray
    threshold: float
    indices: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def sample(dist: Distribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. rows from ``dist``.

    For a mixture the component index is drawn first (by weight), then the
    Gaussian noise for all rows in one call, so the stream consumption depends
    only on ``n`` and the number of components.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if isinstance(dist, DiagonalGaussian):
        z = rng.standard_normal((n, dist.dim))
        return dist.mean + np.sqrt(dist.variance) * z
    if isinstance(dist, GaussianMixture):
        comp = rng.choice(dist.n_components, size=n, p=dist.weights)
        z = rng.standard_normal((n, dist.dim))
        return dist.means[comp] + np.sqrt(dist.variances[comp]) * z
    raise TypeError(f"unsupported distribution type {type(dist).__name__}")


def batch_moments(elites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance of stacked elite sets.

    ``elites`` has shape ``(A, k, d)``. The reductions run over a contiguous
    last axis so that each instance's result does not depend on how many
    other instances share the batch.
    """
    k = elites.shape[1]
    if k == 0:
        raise EmptyEliteError("cannot fit a Gaussian to zero elites")
    cols = np.ascontiguousarray(np.swapaxes(elites, 1, 2))
    mean = cols.sum(axis=-1) / k
    centered = cols - mean[..., None]
    var = (centered * centered).sum(axis=-1) / k
    return mean, var


def fit_gaussian_mle(elites, var_floor: float) -> DiagonalGaussian:
    """Closed-form maximum-likelihood Gaussian for an elite set.

    Parameters
    ----------
    elites : EliteSet or array of shape (k, d)
    var_floor : float
        Lower bound applied elementwise to the fitted variance.
    """
    x = elites.samples if isinstance(elites, EliteSet) else np.asarray(elites, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] == 0:
        raise EmptyEliteError("cannot fit a Gaussian to zero elites")
    mean, var = batch_moments(x[None])
    return DiagonalGaussian(mean[0], np.maximum(var[0], var_floor))


def _component_log_pdf(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (n, C) log densities of every row under every component
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * (diff * diff / variances[None] + np.log(variances)[None] + _LOG_2PI).sum(-1)


def fit_gmm_weighted(
    samples,
    weights,
    prev: GaussianMixture,
    kappa: float,
    em_iters: int = 3,
    var_floor: float = 1e-3,
) -> GaussianMixture:
    """Weighted EM refit of a mixture, warm-started at ``prev``.

    Responsibilities are proportional to ``weights[j]`` times the component
    density. After each M-step the component weights are mixed toward uniform,
    ``w <- (1 - kappa) * w + kappa / C``, which keeps every component alive
    with probability mass at least ``kappa / C``. A component whose total
    responsibility is zero keeps its previous parameters for that round.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.shape != (x.shape[0],):
        raise ParameterError("need one weight per sample")
    if np.any(w < 0) or not np.any(w > 0):
        raise ParameterError("weights must be non-negative and not all zero")
    if not 0.0 <= kappa <= 1.0:
        raise ParameterError(f"kappa must lie in [0, 1], got {kappa}")
    n_comp = prev.n_components
    if x.shape[0] < n_comp:
        raise ParameterError("need at least as many samples as components")

    means = prev.means.copy()
    variances = prev.variances.copy()
    mix = prev.weights.copy()
    for _ in range(em_iters):
        with np.errstate(divide="ignore"):
            log_joint = _component_log_pdf(x, means, variances) + np.log(mix)[None]
        log_norm = logsumexp(log_joint, axis=1, keepdims=True)
        resp = np.exp(log_joint - log_norm) * w[:, None]
        mass = resp.sum(axis=0)
        alive = mass > 0
        safe = np.where(alive, mass, 1.0)
        new_means = (resp.T @ x) / safe[:, None]
        diff = x[:, None, :] - new_means[None]
        new_vars = np.einsum("nc,ncd->cd", resp, diff * diff) / safe[:, None]
        means = np.where(alive[:, None], new_means, means)
        variances = np.where(alive[:, None], np.maximum(new_vars, var_floor), variances)
        em_w = np.where(alive, mass, 0.0)
        em_w = em_w / em_w.sum()
        mix = (1.0 - kappa) * em_w + kappa / n_comp
        mix = mix / mix.sum()
    return GaussianMixture.from_arrays(means, variances, mix)


def _blend(fitted: np.ndarray, current: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 1.0:
        return np.array(fitted, dtype=float, copy=True)
    # current + alpha * (fitted - current) is exact when fitted == current
    return current + alpha * (fitted - current)


def smooth_update(fitted: Distribution, current: Distribution, alpha: float) -> Distribution:
    """Convex combination ``alpha * fitted + (1 - alpha) * current``."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(fitted, DiagonalGaussian) and isinstance(current, DiagonalGaussian):
        if fitted.dim != current.dim:
            raise ParameterError("cannot smooth Gaussians of different dimension")
        return DiagonalGaussian(
            _blend(fitted.mean, current.mean, alpha),
            _blend(fitted.variance, current.variance, alpha),
        )
    if isinstance(fitted, GaussianMixture) and isinstance(current, GaussianMixture):
        if fitted.n_components != current.n_components or fitted.dim != current.dim:
            raise ParameterError("cannot smooth mixtures of different shape")
        w = _blend(fitted.weights, current.weights, alpha)
        return GaussianMixture.from_arrays(
            _blend(fitted.means, current.means, alpha),
            _blend(fitted.variances, current.variances, alpha),
            w / w.sum(),
        )
    raise ParameterError("fitted and current must be the same distribution family")


def log_density(dist: Distribution, x) -> np.ndarray | float:
    """Log density at ``x``.

    ``x`` may be a single point of length ``d``, a scalar (when ``d == 1``),
    a flat array of 1D points, or an ``(n, d)`` batch. A single point returns
    a float, anything else an array of length ``n``.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or (arr.ndim == 1 and arr.shape[0] == dist.dim):
        pts, single = arr.reshape(1, dist.dim), True
    elif arr.ndim == 1 and dist.dim == 1:
        pts, single = arr.reshape(-1, 1), False
    elif arr.ndim == 2:
        pts, single = arr, False
    else:
        raise ParameterError(f"cannot evaluate points of shape {arr.shape} in dimension {dist.dim}")
    if pts.shape[1] != dist.dim:
        raise ParameterError(f"points have dimension {pts.shape[1]}, distribution {dist.dim}")
    if isinstance(dist, DiagonalGaussian):
        out = _component_log_pdf(pts, dist.mean[None], dist.variance[None])[:, 0]
    else:
        with np.errstate(divide="ignore"):
            log_w = np.log(dist.weights)
        out = logsumexp(_component_log_pdf(pts, dist.means, dist.variances) + log_w, axis=1)
    return float(out[0]) if single else out
