"""Gaussian mixture model with diagonal covariances, fitted by EM."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, EmptyComponent, TooFewPixels
from .image import MultiChannelImage, ResponsibilityField, argmax_labeling, check_label_count, require_channels

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-6
EMPTY_MASS = 1e-12


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape or mean.ndim != 1:
            raise DimensionMismatch(f"mean {mean.shape} and var {var.shape} differ")
        if (var <= 0).any():
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Global mixing weights plus per-class diagonal Gaussians.

    ``means`` and ``var`` are (K, m) arrays; row k describes component k.
    """

    weights: np.ndarray
    means: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.var, dtype=np.float64))
        if means.shape != var.shape or weights.shape != (means.shape[0],):
            raise DimensionMismatch(
                f"inconsistent shapes: weights {weights.shape}, means {means.shape}, var {var.shape}"
            )
        if weights.min() < 0 or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixing weights must be nonnegative and sum to 1")
        if (var <= 0).any():
            raise ValueError("variances must be positive")
        for name, a in (("weights", weights), ("means", means), ("var", var)):
            object.__setattr__(self, name, a)

    @classmethod
    def from_components(cls, weights, components):
        return cls(weights, [g.mean for g in components], [g.var for g in components])

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def components(self):
        return [DiagGaussian(mu, v) for mu, v in zip(self.means, self.var)]

    def permuted(self, order):
        order = np.asarray(order)
        return MixtureParams(self.weights[order], self.means[order], self.var[order])


def log_density(g: DiagGaussian, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != g.mean.shape:
        raise DimensionMismatch(f"point has dim {x.shape[0]}, component has {g.dim}")
    d = x - g.mean
    return float(
        -0.5 * g.dim * LOG_2PI - 0.5 * np.log(g.var).sum() - 0.5 * (d * d / g.var).sum()
    )


def log_gauss_table(x, means, var):
    """(N, K) table of per-pixel component log densities."""
    return kernels.log_gauss_table(x, means, var)


def _log_joint(log_prior, log_g):
    with np.errstate(divide="ignore"):
        return log_prior + log_g


def pixel_log_likelihood(log_prior, log_g):
    """log sum_k exp(log_prior + log_g) per row, max-shifted.

    Terms are summed in sorted order so the result does not depend on how the
    components are numbered.
    """
    a = _log_joint(log_prior, log_g)
    top = a.max(axis=1)
    return top + np.log(np.sort(np.exp(a - top[:, None]), axis=1).sum(axis=1))


def mixture_nll(log_prior, log_g):
    """Mean negative log-likelihood over pixels; shared by NLL and NLL_V."""
    ll = pixel_log_likelihood(log_prior, log_g)
    return float(-ll.sum() / ll.shape[0])


def posterior(log_prior, log_g):
    a = _log_joint(log_prior, log_g)
    top = a.max(axis=1, keepdims=True)
    w = np.exp(a - top)
    return w / w.sum(axis=1, keepdims=True)


def _prior_table(weights, n):
    with np.errstate(divide="ignore"):
        return np.broadcast_to(np.log(weights), (n, weights.shape[0]))


def nll(img: MultiChannelImage, p: MixtureParams) -> float:
    require_channels(img, p.dim)
    log_g = log_gauss_table(img.pixels, p.means, p.var)
    return mixture_nll(_prior_table(p.weights, img.n_pixels), log_g)


def e_step(img: MultiChannelImage, p: MixtureParams) -> ResponsibilityField:
    require_channels(img, p.dim)
    log_g = log_gauss_table(img.pixels, p.means, p.var)
    return ResponsibilityField(img.domain, posterior(_prior_table(p.weights, img.n_pixels), log_g))


def weighted_moments(x, w, var_floor=VAR_FLOOR):
    """Responsibility-weighted class mass, mean and per-channel variance.

    Returns ``(mass, means, var)`` with shapes (K,), (K, m), (K, m). Classes with
    no mass get NaN moments; callers decide what that means.
    """
    mass = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (w.T @ x) / mass[:, None]
        diff = x[:, None, :] - means[None, :, :]
        var = np.einsum("nk,nkm->km", w, diff * diff) / mass[:, None]
    return mass, means, np.maximum(var, var_floor)


def _check_mass(mass):
    dead = np.flatnonzero(mass < EMPTY_MASS)
    if dead.size:
        raise EmptyComponent(f"component(s) {dead.tolist()} have no responsibility", dead)


def m_step(img: MultiChannelImage, w: ResponsibilityField, var_floor=VAR_FLOOR) -> MixtureParams:
    if w.weights.shape[0] != img.n_pixels:
        raise DimensionMismatch("responsibilities do not match the image domain")
    mass, means, var = weighted_moments(img.pixels, w.weights, var_floor)
    _check_mass(mass)
    return MixtureParams(mass / img.n_pixels, means, var)


@dataclass
class EMOptions:
    threshold: float = 1e-3
    max_iters: int = 500
    var_floor: float = VAR_FLOOR
    max_rescues: int = 3
    n_init: int = 1


@dataclass
class GMMFit:
    params: MixtureParams
    responsibilities: ResponsibilityField
    nll_trace: np.ndarray
    n_iter: int
    converged: bool
    rescues: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.responsibilities, self.nll_trace))

    @property
    def mask(self):
        return argmax_labeling(self.responsibilities)


def global_variance(x, var_floor=VAR_FLOOR):
    return np.maximum(x.var(axis=0), var_floor)


def random_init(img: MultiChannelImage, k: int, rng, var_floor=VAR_FLOOR) -> MixtureParams:
    """Means at k distinct random ROI pixels, uniform weights.

    Every component starts with the global per-channel variance divided by k;
    full global variance makes the components overlap so much that EM often
    stalls on the symmetric saddle and trips the gain threshold.
    """
    x = img.pixels
    picks = rng.choice(x.shape[0], size=k, replace=False)
    var = np.tile(np.maximum(global_variance(x, var_floor) / k, var_floor), (k, 1))
    return MixtureParams(np.full(k, 1.0 / k), x[picks].copy(), var)


def rescue_components(x, mass, means, var, dead, pixel_ll, var_floor=VAR_FLOOR):
    """Re-seed dead components at the worst-explained pixels."""
    means = means.copy()
    var = var.copy()
    worst = np.argsort(pixel_ll, kind="stable")
    g = global_variance(x, var_floor)
    for k, idx in zip(dead, worst):
        means[k] = x[idx]
        var[k] = g
    return means, var


def _check_fit_args(img, k):
    k = check_label_count(k) if k != 1 else 1
    if img.n_pixels < k:
        raise TooFewPixels(f"{img.n_pixels} pixels cannot support {k} classes")
    return k


def em_fit(img: MultiChannelImage, k: int, seed=0, opts: EMOptions | None = None) -> GMMFit:
    """Classical EM from a seeded random start.

    Stops once the per-iteration NLL gain drops below ``opts.threshold``
    (negative gains included) or after ``opts.max_iters`` iterations. The
    returned responsibilities come from one final E-step. With
    ``opts.n_init > 1`` the run with the lowest final NLL is kept; the first
    restart draws from the same stream as a single run.
    """
    opts = opts or EMOptions()
    k = _check_fit_args(img, k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, opts.n_init)):
        fit = _em_single(img, k, rng, opts)
        if best is None or fit.nll_trace[-1] < best.nll_trace[-1]:
            best = fit
    return best


def _em_single(img, k, rng, opts):
    x = img.pixels
    n = x.shape[0]
    p = random_init(img, k, rng, opts.var_floor)
    log_g = log_gauss_table(x, p.means, p.var)
    prev = mixture_nll(_prior_table(p.weights, n), log_g)
    trace, rescues = [], []
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        w = posterior(_prior_table(p.weights, n), log_g)
        mass, means, var = weighted_moments(x, w, opts.var_floor)
        dead = np.flatnonzero(mass < EMPTY_MASS)
        if dead.size:
            if len(rescues) >= opts.max_rescues:
                raise EmptyComponent(
                    f"component(s) {dead.tolist()} died after {len(rescues)} rescues", dead
                )
            ll = pixel_log_likelihood(_prior_table(p.weights, n), log_g)
            means, var = rescue_components(x, mass, means, var, dead, ll, opts.var_floor)
            weights = mass / n
            weights[dead] = 1.0 / k
            weights /= weights.sum()
            rescues.append(it)
            logger.info("rescued components %s at iteration %d", dead.tolist(), it)
        else:
            weights = mass / n
        p = MixtureParams(weights, means, var)
        log_g = log_gauss_table(x, p.means, p.var)
        cur = mixture_nll(_prior_table(p.weights, n), log_g)
        trace.append(cur)
        if dead.size:
            prev = cur
            continue
        if prev - cur < opts.threshold:
            converged = True
            break
        prev = cur
    w = ResponsibilityField(img.domain, posterior(_prior_table(p.weights, n), log_g))
    return GMMFit(p, w, np.asarray(trace), it, converged, rescues)
