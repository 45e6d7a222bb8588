"""Mixture losses as functions of the responsibilities, with their gradients.

All gradients are with respect to the (N, K) responsibility matrix ``w`` and
are pushed through the network by :func:`network.backward`.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ShapeError
from .gmm import VAR_FLOOR, DiagGaussian, log_gauss_table, mixture_nll, pixel_log_likelihood


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def nll_v_and_grad(x, w, means, var):
    """NLL_V with proportions ``w`` and fixed components.

    d/dw_xk = -(1/N) g_xk / sum_k' w_xk' g_xk', evaluated in log space.
    """
    log_g = log_gauss_table(x, means, var)
    log_w = _log(w)
    loss = mixture_nll(log_w, log_g)
    lse = pixel_log_likelihood(log_w, log_g)
    grad = -np.exp(log_g - lse[:, None]) / x.shape[0]
    return loss, grad


def nll_v_grad_wrt_w(img, w, components):
    """Gradient of NLL_V in the proportions, components held fixed.

    ``components`` is a sequence of :class:`gmm.DiagGaussian` or a
    ``(means, var)`` pair of (K, m) arrays.
    """
    means, var = _unpack(components)
    weights = w.weights if hasattr(w, "weights") else np.asarray(w)
    if means.shape[1] != img.channels or weights.shape != (img.n_pixels, means.shape[0]):
        raise DimensionMismatch("responsibilities, image and components disagree")
    return nll_v_and_grad(img.pixels, weights, means, var)[1]


def _unpack(components):
    if all(isinstance(g, DiagGaussian) for g in components):
        means = [g.mean for g in components]
        var = [g.var for g in components]
    else:
        means, var = components
    return np.atleast_2d(np.asarray(means, float)), np.atleast_2d(np.asarray(var, float))


def _moments_raw(x, w):
    mass = w.sum(axis=0)
    means = (w.T @ x) / mass[:, None]
    diff = x[:, None, :] - means[None, :, :]
    var = np.einsum("nk,nkm->km", w, diff * diff) / mass[:, None]
    return mass, means, diff, var


def gmm_nll_and_grad(x, w, var_floor=VAR_FLOOR, through_components=True):
    """NLL of the GMM whose parameters are the M-step of ``w``, and d/dw.

    Mixing weights, means and (floored) variances are all treated as functions
    of ``w`` and differentiated through; floored variance entries contribute
    no gradient. With ``through_components=False`` only the mixing weights are
    differentiated and means/variances count as constants. Returns
    ``(loss, grad, (weights, means, var))``.
    """
    n = x.shape[0]
    mass, means, diff, var_raw = _moments_raw(x, w)
    var = np.maximum(var_raw, var_floor)
    weights = mass / n
    log_g = log_gauss_table(x, means, var)
    log_prior = np.broadcast_to(_log(weights), log_g.shape)
    loss = mixture_nll(log_prior, log_g)
    lse = pixel_log_likelihood(log_prior, log_g)
    r = np.exp(log_prior + log_g - lse[:, None])  # posterior under the M-step params

    d_weights = -(r.sum(axis=0) / weights) / n
    d_means = -np.einsum("nk,nkm->km", r, diff) / var / n
    d_var = -0.5 * np.einsum("nk,nkm->km", r, diff * diff / var[None] ** 2 - 1.0 / var[None]) / n
    d_var = np.where(var_raw >= var_floor, d_var, 0.0)

    grad = np.broadcast_to(d_weights / n, w.shape).copy()
    if not through_components:
        return loss, grad, (weights, means, var)
    grad += np.einsum("km,nkm->nk", d_means, diff) / mass
    grad += np.einsum("km,nkm->nk", d_var, diff * diff - var_raw[None]) / mass
    return loss, grad, (weights, means, var)


def mu_regularizer(mu, mu_data) -> float:
    """Squared Frobenius distance between estimated and reference class means."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    mu_data = np.atleast_2d(np.asarray(mu_data, dtype=np.float64))
    if mu.shape != mu_data.shape:
        raise ShapeError(f"means {mu.shape} and reference {mu_data.shape} differ")
    d = mu - mu_data
    return float((d * d).sum())


def mu_regularizer_and_grad(x, w, mu_data):
    """r(mu(w)) with mu the responsibility-weighted class means, and d r / d w."""
    mass, means, diff, _ = _moments_raw(x, w)
    value = mu_regularizer(means, mu_data)
    grad = 2.0 * np.einsum("km,nkm->nk", means - mu_data, diff) / mass
    return value, grad
