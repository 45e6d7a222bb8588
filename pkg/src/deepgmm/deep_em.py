"""deepG / deepSVG: EM with the E-step replaced by a gradient step on a CNN.

Each outer step evaluates the mixture loss at the current network output and
the M-step parameters computed from it, takes one AdamW step on the network,
recomputes the output and redoes the M-step.

Gradient conventions:

* deepSVG: proportions are the network output; means and variances are held
  at their M-step values during the gradient step.
* deepG: mixing weights, means and variances are all M-step functions of the
  network output and are differentiated through. With frozen components the
  deepG loss depends on the output only through the mixing weights, which
  gives every pixel the same gradient.
* The mean regularizer is differentiated through the M-step means in both
  variants; otherwise it would not reach the network at all.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, HeterogeneousChannels, MissingClass, NonFinite, TooFewPixels
from .gmm import VAR_FLOOR, MixtureParams, weighted_moments
from .image import MultiChannelImage, ResponsibilityField, SegmentationMask, argmax_labeling
from .losses import gmm_nll_and_grad, mu_regularizer_and_grad, nll_v_and_grad
from .network import NetworkConfig, NetworkState, adamw_step, backward, forward, init_state
from .svgmm import SpatialMixtureParams

logger = logging.getLogger(__name__)

VARIANTS = ("deepG", "deepSVG")


@dataclass
class DeepFitOptions:
    variant: str = "deepSVG"
    lr: float = 1e-3
    threshold: float = 1e-3
    max_steps: int = 5000
    window: int = 20
    lam: float = 0.0
    mu_data: np.ndarray | None = None
    weight_decay: float = 0.0
    var_floor: float = VAR_FLOOR
    # deepG only: "full" differentiates pi, mu and Sigma through the M-step,
    # "pi" differentiates the mixing weights alone
    deepg_grad: str = "full"

    def __post_init__(self):
        if self.deepg_grad not in ("full", "pi"):
            raise ConfigError(f"deepg_grad must be 'full' or 'pi', got {self.deepg_grad!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.threshold > 0:
            raise ConfigError("threshold must be positive")
        if self.window < 1 or self.max_steps < 1:
            raise ConfigError("window and max_steps must be >= 1")
        if self.lam != 0 and self.mu_data is None:
            raise ConfigError("lambda != 0 requires mu_data")
        if self.mu_data is not None:
            self.mu_data = np.atleast_2d(np.asarray(self.mu_data, dtype=np.float64))


@dataclass(frozen=True)
class RegularizedLoss:
    base: float
    penalty: float

    @property
    def total(self):
        return self.base + self.penalty


@dataclass(frozen=True)
class StepRecord:
    step: int
    base: float
    penalty: float
    total: float

    def line(self):
        return f"{self.step}\t{self.base:.9f}\t{self.penalty:.9f}\t{self.total:.9f}"


def mixture_loss(variant, x, w, lam=0.0, mu_data=None, var_floor=VAR_FLOOR, deepg_grad="full"):
    """Loss, its gradient in ``w`` and the M-step parameters of ``w``.

    Returns ``(RegularizedLoss, grad, params)`` where params is a
    :class:`MixtureParams` (deepG) or :class:`SpatialMixtureParams` (deepSVG).
    """
    if variant == "deepSVG":
        _, means, var = weighted_moments(x, w, var_floor)
        base, grad = nll_v_and_grad(x, w, means, var)
        params = SpatialMixtureParams(w, means, var)
    else:
        base, grad, (weights, means, var) = gmm_nll_and_grad(x, w, var_floor, deepg_grad == "full")
        params = MixtureParams(weights / weights.sum(), means, var)
    penalty = 0.0
    if lam:
        value, rgrad = mu_regularizer_and_grad(x, w, mu_data)
        penalty = lam * value
        grad = grad + lam * rgrad
    return RegularizedLoss(base, penalty), grad, params


def window_converged(totals, window, threshold):
    """True once the last ``window`` losses failed to beat the earlier best by ``threshold``."""
    if len(totals) <= window:
        return False
    return min(totals[:-window]) - min(totals[-window:]) < threshold


@dataclass
class DeepFit:
    params: object
    mask: SegmentationMask
    responsibilities: ResponsibilityField
    trace: list
    final_loss: RegularizedLoss
    state: NetworkState
    steps: int
    converged: bool

    @property
    def loss_trace(self):
        return np.array([r.total for r in self.trace])

    def __iter__(self):
        return iter((self.params, self.mask, self.loss_trace))


@dataclass
class MultiFit:
    state: NetworkState
    trace: list
    params: list
    final_loss: RegularizedLoss
    steps: int
    converged: bool
    masks: list = field(default_factory=list)


def _check_images(images, k):
    if not images:
        raise ConfigError("need at least one image")
    m = images[0].channels
    for img in images:
        if img.channels != m:
            raise HeterogeneousChannels("all images must have the same channel count")
        if img.n_pixels < k:
            raise TooFewPixels(f"{img.n_pixels} pixels cannot support {k} classes")


def _run(images, k, cfg, seed, opts, state=None, callback=None):
    _check_images(images, k)
    if cfg.out_channels != k or cfg.in_channels != images[0].channels:
        raise ConfigError(
            f"network maps {cfg.in_channels}->{cfg.out_channels} channels, "
            f"data has {images[0].channels} channels and {k} classes"
        )
    if opts.mu_data is not None and opts.mu_data.shape != (k, images[0].channels):
        raise ConfigError(f"mu_data must be {k}x{images[0].channels}")
    state = state if state is not None else init_state(cfg, seed)

    def evaluate():
        tapes, weights, grads, params = [], [], [], []
        base = penalty = 0.0
        for img in images:
            w = forward(state, cfg, img).weights
            loss, g, p = mixture_loss(opts.variant, img.pixels, w, opts.lam, opts.mu_data, opts.var_floor,
                                      opts.deepg_grad)
            tapes.append(state.tape)
            weights.append(w)
            grads.append(g)
            params.append(p)
            base += loss.base
            penalty += loss.penalty
        return RegularizedLoss(base, penalty), tapes, weights, grads, params

    loss, tapes, weights, grads, params = evaluate()
    trace, totals = [], []
    converged = False
    step = 0
    for step in range(1, opts.max_steps + 1):
        if not np.isfinite(loss.total):
            raise NonFinite(f"loss became {loss.total} at step {step}", step)
        trace.append(StepRecord(step, loss.base, loss.penalty, loss.total))
        totals.append(loss.total)
        if callback is not None:
            callback(step, weights, params, loss)
        total_grad = None
        for img, tape, g in zip(images, tapes, grads):
            state.tape = tape
            gi = backward(state, cfg, img, g)
            if total_grad is None:
                total_grad = gi
            else:
                for name in total_grad:
                    total_grad[name] += gi[name]
        adamw_step(state, total_grad, opts.lr, opts.weight_decay)
        loss, tapes, weights, grads, params = evaluate()
        if window_converged(totals, opts.window, opts.threshold):
            converged = True
            break
    if not np.isfinite(loss.total):
        raise NonFinite(f"loss became {loss.total} after step {step}", step)
    return state, trace, loss, weights, params, step, converged


def deep_fit_single(img: MultiChannelImage, k: int, cfg: NetworkConfig, seed=0,
                    opts: DeepFitOptions | None = None, callback=None) -> DeepFit:
    """Fit deepG or deepSVG to one image; mask is the argmax of the final output."""
    opts = opts or DeepFitOptions()
    state, trace, loss, weights, params, steps, converged = _run([img], k, cfg, seed, opts, callback=callback)
    w = ResponsibilityField(img.domain, weights[0])
    return DeepFit(params[0], argmax_labeling(w), w, trace, loss, state, steps, converged)


def deep_train_multi(images, k, cfg: NetworkConfig, seed=0, opts: DeepFitOptions | None = None,
                     callback=None) -> MultiFit:
    """Train one network on several images with the summed (regularized) objective.

    Gradients are accumulated over all images in order before each update.
    """
    opts = opts or DeepFitOptions()
    state, trace, loss, weights, params, steps, converged = _run(
        list(images), k, cfg, seed, opts, callback=callback
    )
    masks = [argmax_labeling(ResponsibilityField(img.domain, w)) for img, w in zip(images, weights)]
    return MultiFit(state, trace, params, loss, steps, converged, masks)


def predict(state: NetworkState, cfg: NetworkConfig, img: MultiChannelImage):
    """One forward pass and argmax; no optimization."""
    w = forward(state, cfg, img)
    state.tape = None
    return w, argmax_labeling(w)


def estimate_mu_data(samples, n_images=None, seed=None):
    """Average over images of the per-class mean intensity vectors.

    ``samples`` is a sequence of ``(image, ground_truth_mask)``. When
    ``n_images`` is smaller than the sample count a seeded random subset is used.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("need at least one labelled image")
    if n_images is not None and n_images < len(samples):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(samples), size=n_images, replace=False)
        samples = [samples[i] for i in sorted(picks)]
    k = samples[0][1].classes
    rows = []
    for idx, (img, mask) in enumerate(samples):
        x = img.pixels
        means = np.empty((k, img.channels))
        for c in range(k):
            sel = mask.labels == c
            if not sel.any():
                raise MissingClass(f"image {idx} has no pixels of class {c}")
            means[c] = x[sel].mean(axis=0)
        rows.append(means)
    return np.mean(rows, axis=0)
