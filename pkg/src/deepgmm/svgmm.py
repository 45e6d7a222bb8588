"""Spatially variant GMM: a separate mixing-proportion vector at every pixel."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyComponent
from .gmm import (
    EMPTY_MASS,
    VAR_FLOOR,
    EMOptions,
    MixtureParams,
    _check_fit_args,
    _check_mass,
    log_gauss_table,
    mixture_nll,
    pixel_log_likelihood,
    posterior,
    random_init,
    rescue_components,
    weighted_moments,
)
from .image import MultiChannelImage, PixelDomain, ResponsibilityField, argmax_labeling, require_channels

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SpatialMixtureParams:
    """Per-pixel proportions (N, K) with shared (K, m) means and variances."""

    proportions: np.ndarray
    means: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        prop = np.asarray(self.proportions, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.var, dtype=np.float64))
        if means.shape != var.shape or prop.ndim != 2 or prop.shape[1] != means.shape[0]:
            raise DimensionMismatch(
                f"inconsistent shapes: proportions {prop.shape}, means {means.shape}, var {var.shape}"
            )
        if prop.min() < 0 or np.abs(prop.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("proportion rows must be nonnegative and sum to 1")
        if (var <= 0).any():
            raise ValueError("variances must be positive")
        for name, a in (("proportions", prop), ("means", means), ("var", var)):
            object.__setattr__(self, name, a)

    @classmethod
    def from_gmm(cls, p: MixtureParams, n_pixels):
        return cls(np.tile(p.weights, (n_pixels, 1)), p.means, p.var)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def _log_prior(prop):
    with np.errstate(divide="ignore"):
        return np.log(prop)


def _check(img, p):
    require_channels(img, p.dim)
    if p.proportions.shape[0] != img.n_pixels:
        raise DimensionMismatch("proportions do not match the image domain")


def nll_v(img: MultiChannelImage, p: SpatialMixtureParams) -> float:
    _check(img, p)
    log_g = log_gauss_table(img.pixels, p.means, p.var)
    return mixture_nll(_log_prior(p.proportions), log_g)


def e_step_v(img: MultiChannelImage, p: SpatialMixtureParams) -> ResponsibilityField:
    _check(img, p)
    log_g = log_gauss_table(img.pixels, p.means, p.var)
    return ResponsibilityField(img.domain, posterior(_log_prior(p.proportions), log_g))


def m_step_v(img: MultiChannelImage, w: ResponsibilityField, var_floor=VAR_FLOOR) -> SpatialMixtureParams:
    if w.weights.shape[0] != img.n_pixels:
        raise DimensionMismatch("responsibilities do not match the image domain")
    mass, means, var = weighted_moments(img.pixels, w.weights, var_floor)
    _check_mass(mass)
    return SpatialMixtureParams(w.weights, means, var)


@dataclass
class SVGMMFit:
    domain: PixelDomain
    params: SpatialMixtureParams
    nll_trace: np.ndarray
    n_iter: int
    converged: bool
    rescues: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.nll_trace))

    @property
    def responsibilities(self):
        return ResponsibilityField(self.domain, self.params.proportions)

    @property
    def mask(self):
        return argmax_labeling(self.responsibilities)


def em_fit_v(img: MultiChannelImage, k: int, seed=0, opts: EMOptions | None = None) -> SVGMMFit:
    """EM for the spatially variant model.

    Starts from the same seeded random parameters as :func:`gmm.em_fit`,
    turns one E-step into the initial proportions, then iterates with the same
    stopping rule. The final mask is the argmax of the proportions.
    """
    opts = opts or EMOptions()
    k = _check_fit_args(img, k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, opts.n_init)):
        fit = _em_v_single(img, k, rng, opts)
        if best is None or fit.nll_trace[-1] < best.nll_trace[-1]:
            best = fit
    return best


def _em_v_single(img, k, rng, opts):
    x = img.pixels
    n = x.shape[0]
    p0 = random_init(img, k, rng, opts.var_floor)
    means, var = p0.means, p0.var
    log_g = log_gauss_table(x, means, var)
    prop = posterior(np.broadcast_to(np.log(p0.weights), (n, k)), log_g)
    prev = mixture_nll(_log_prior(prop), log_g)
    trace, rescues = [], []
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        log_prior = _log_prior(prop)
        w = posterior(log_prior, log_g)
        mass, means, var = weighted_moments(x, w, opts.var_floor)
        dead = np.flatnonzero(mass < EMPTY_MASS)
        if dead.size:
            if len(rescues) >= opts.max_rescues:
                raise EmptyComponent(
                    f"component(s) {dead.tolist()} died after {len(rescues)} rescues", dead
                )
            ll = pixel_log_likelihood(log_prior, log_g)
            means, var = rescue_components(x, mass, means, var, dead, ll, opts.var_floor)
            # a dead class has ~zero proportion everywhere; give it mass back
            w = 0.5 * w + 0.5 / k
            rescues.append(it)
            logger.info("rescued components %s at iteration %d", dead.tolist(), it)
        prop = w
        log_g = log_gauss_table(x, means, var)
        cur = mixture_nll(_log_prior(prop), log_g)
        trace.append(cur)
        if dead.size:
            prev = cur
            continue
        if prev - cur < opts.threshold:
            converged = True
            break
        prev = cur
    params = SpatialMixtureParams(prop, means, var)
    return SVGMMFit(img.domain, params, np.asarray(trace), it, converged, rescues)
