"""Small U-Net with a softmax class head, hand-written backprop and AdamW.

Everything runs in float64 on (batch, channels, height, width) arrays. A
forward pass records the activations needed by :func:`backward` on the
state; updating the parameters invalidates that record.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigMismatch, ShapeError, StaleActivations
from .image import MultiChannelImage, ResponsibilityField

ARCHS = ("unet", "pixel_logits")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    out_channels: int
    depth: int = 3
    base_width: int = 16
    kernel_size: int = 3
    convs_per_level: int = 2
    arch: str = "unet"
    # only for arch="pixel_logits": one free logit vector per pixel
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigMismatch(f"unknown architecture {self.arch!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigMismatch("channel counts must be positive")
        if self.arch == "unet":
            if self.depth < 1 or self.base_width < 1 or self.convs_per_level < 1:
                raise ConfigMismatch("depth, base_width and convs_per_level must be >= 1")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ConfigMismatch("kernel_size must be odd")
        elif self.image_shape is None:
            raise ConfigMismatch("pixel_logits needs image_shape")

    def width(self, level):
        return self.base_width * 2 ** level

    @property
    def multiple(self):
        return 2 ** self.depth if self.arch == "unet" else 1

    def to_dict(self):
        d = {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "depth": self.depth, "base_width": self.base_width,
            "kernel_size": self.kernel_size, "convs_per_level": self.convs_per_level,
            "arch": self.arch,
        }
        if self.image_shape is not None:
            d["image_shape"] = "x".join(str(v) for v in self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        shape = d.get("image_shape")
        return cls(
            in_channels=int(d["in_channels"]), out_channels=int(d["out_channels"]),
            depth=int(d.get("depth", 3)), base_width=int(d.get("base_width", 16)),
            kernel_size=int(d.get("kernel_size", 3)),
            convs_per_level=int(d.get("convs_per_level", 2)),
            arch=d.get("arch", "unet"),
            image_shape=tuple(int(v) for v in shape.split("x")) if shape else None,
        )


def toy_config(in_channels=1, out_channels=2):
    """Config small enough (~1.6k parameters for one channel) for gradient checks."""
    return NetworkConfig(in_channels, out_channels, depth=1, base_width=4)


def conv_layers(cfg):
    """Ordered (name, in_ch, out_ch, kernel) for every convolution."""
    layers = []
    k = cfg.kernel_size
    c = cfg.in_channels
    for level in range(cfg.depth):
        for i in range(cfg.convs_per_level):
            layers.append((f"enc{level}.conv{i}", c, cfg.width(level), k))
            c = cfg.width(level)
    for i in range(cfg.convs_per_level):
        layers.append((f"mid.conv{i}", c, cfg.width(cfg.depth), k))
        c = cfg.width(cfg.depth)
    for level in reversed(range(cfg.depth)):
        c = c + cfg.width(level)
        for i in range(cfg.convs_per_level):
            layers.append((f"dec{level}.conv{i}", c, cfg.width(level), k))
            c = cfg.width(level)
    layers.append(("head", c, cfg.out_channels, 1))
    return layers


@dataclass(eq=False)
class NetworkState:
    """Parameters plus AdamW moments. Mutated in place by :func:`adamw_step`."""

    params: dict
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0
    version: int = 0
    tape: object = field(default=None, repr=False)

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, np.zeros_like(p))
            self.exp_avg_sq.setdefault(name, np.zeros_like(p))

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def touch(self):
        self.version += 1
        self.tape = None

    def copy(self):
        return NetworkState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.exp_avg.items()},
            {k: v.copy() for k, v in self.exp_avg_sq.items()},
            self.step,
        )


def init_state(cfg: NetworkConfig, seed=0) -> NetworkState:
    """Fan-in scaled uniform (He) initialization, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    if cfg.arch == "pixel_logits":
        h, w = cfg.image_shape
        params["logits"] = rng.uniform(-0.01, 0.01, size=(cfg.out_channels, h, w))
        return NetworkState(params)
    for name, cin, cout, k in conv_layers(cfg):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[f"{name}.bias"] = np.zeros(cout)
    return NetworkState(params)


# ---------------------------------------------------------------- layers


def _conv_forward(x, weight, bias):
    b, _, h, w = x.shape
    cout, _, k, _ = weight.shape
    cols = kernels.im2col(x, k, k // 2)
    out = cols @ weight.reshape(cout, -1).T + bias
    return np.ascontiguousarray(out.reshape(b, h, w, cout).transpose(0, 3, 1, 2)), cols


def _conv_backward(dout, x_shape, cols, weight, need_dx=True):
    cout, _, k, _ = weight.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(weight.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_dx:
        dx = kernels.col2im(dmat @ weight.reshape(cout, -1), x_shape, k, k // 2)
    return dx, dw, db


def _upsample(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(d):
    b, c, h, w = d.shape
    return d.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def softmax(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def pad_to_multiple(values, multiple):
    """Reflect-pad (m, H, W) at the bottom/right so H and W divide ``multiple``."""
    _, h, w = values.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return values
    mode = "reflect" if ph < h and pw < w else "symmetric"
    if ph >= 2 * h or pw >= 2 * w:
        mode = "edge"
    return np.pad(values, ((0, 0), (0, ph), (0, pw)), mode=mode)


class _Tape:
    __slots__ = ("image", "version", "conv", "relu", "pool", "shape", "weights")

    def __init__(self, image, version):
        self.image = image
        self.version = version
        self.conv = {}
        self.relu = {}
        self.pool = {}
        self.shape = None
        self.weights = None


def _logits(state, cfg, img, tape):
    x = pad_to_multiple(img.values, cfg.multiple)[None]
    p = state.params
    h = x
    skips = []

    def block(prefix, h):
        for i in range(cfg.convs_per_level):
            name = f"{prefix}.conv{i}"
            out, cols = _conv_forward(h, p[f"{name}.weight"], p[f"{name}.bias"])
            tape.conv[name] = (h.shape, cols)
            h = np.maximum(out, 0.0)
            tape.relu[name] = h > 0
        return h

    for level in range(cfg.depth):
        h = block(f"enc{level}", h)
        skips.append(h)
        h, idx = kernels.maxpool2_forward(h)
        tape.pool[level] = idx
    h = block("mid", h)
    for level in reversed(range(cfg.depth)):
        h = np.concatenate([_upsample(h), skips[level]], axis=1)
        h = block(f"dec{level}", h)
    out, cols = _conv_forward(h, p["head.weight"], p["head.bias"])
    tape.conv["head"] = (h.shape, cols)
    return out[0, :, : img.domain.height, : img.domain.width]


def _check_input(cfg, img):
    if img.channels != cfg.in_channels:
        raise ConfigMismatch(f"network expects {cfg.in_channels} channels, image has {img.channels}")
    if cfg.arch == "pixel_logits" and tuple(cfg.image_shape) != img.domain.shape:
        raise ShapeError(f"pixel logits sized {cfg.image_shape}, image is {img.domain.shape}")


def forward(state: NetworkState, cfg: NetworkConfig, img: MultiChannelImage) -> ResponsibilityField:
    """Softmax class probabilities for every ROI pixel.

    Inputs are reflect-padded to a multiple of ``2**depth`` and the logits are
    cropped back before the softmax.
    """
    _check_input(cfg, img)
    tape = _Tape(img, state.version)
    if cfg.arch == "pixel_logits":
        logits = state.params["logits"]
    else:
        logits = _logits(state, cfg, img, tape)
    z = img.domain.flatten(logits)  # (N, K)
    w = softmax(z, axis=1)
    tape.weights = w
    state.tape = tape
    return ResponsibilityField(img.domain, w)


def backward(state: NetworkState, cfg: NetworkConfig, img: MultiChannelImage, loss_grad) -> dict:
    """Gradient of a loss w.r.t. every parameter, given dloss/d(softmax output) over the ROI."""
    tape = state.tape
    if tape is None or tape.image is not img or tape.version != state.version:
        raise StaleActivations("backward needs a forward pass on this image with the current parameters")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    w = tape.weights
    if loss_grad.shape != w.shape:
        raise ShapeError(f"loss gradient must be {w.shape}, got {loss_grad.shape}")
    dz = w * (loss_grad - (w * loss_grad).sum(axis=1, keepdims=True))
    dlogits = img.domain.unflatten(dz, fill=0.0)  # (K, H, W)
    if cfg.arch == "pixel_logits":
        return {"logits": dlogits}

    p = state.params
    grads = {}
    hp, wp = pad_to_multiple(img.values[:1], cfg.multiple).shape[1:]
    d = np.zeros((1, cfg.out_channels, hp, wp))
    d[0, :, : img.domain.height, : img.domain.width] = dlogits

    def conv_back(name, d, need_dx=True):
        x_shape, cols = tape.conv[name]
        dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = _conv_backward(
            d, x_shape, cols, p[f"{name}.weight"], need_dx
        )
        return dx

    def block_back(prefix, d, last_needs_dx=True):
        for i in reversed(range(cfg.convs_per_level)):
            name = f"{prefix}.conv{i}"
            d = d * tape.relu[name]
            d = conv_back(name, d, need_dx=(i > 0 or last_needs_dx))
        return d

    d = conv_back("head", d)
    skip_grads = {}
    for level in range(cfg.depth):
        d = block_back(f"dec{level}", d)
        c_up = cfg.width(level + 1)
        skip_grads[level] = d[:, c_up:]
        d = _upsample_backward(d[:, :c_up])
    d = block_back("mid", d)
    for level in reversed(range(cfg.depth)):
        d = kernels.maxpool2_backward(d, tape.pool[level]) + skip_grads[level]
        d = block_back(f"enc{level}", d, last_needs_dx=level > 0)
    return grads


# ---------------------------------------------------------------- optimizer


def adamw_step(state: NetworkState, grads: dict, lr=1e-3, weight_decay=0.0,
               betas=(0.9, 0.999), eps=1e-8) -> NetworkState:
    """One AdamW update with bias correction and decoupled weight decay (in place)."""
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in state.params.items():
        g = grads[name]
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.touch()
    return state


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    step: float
    n_checked: int
    worst_param: str
    passed: bool


def finite_diff_check(state, cfg, img, means, var, step=1e-5, tolerance=1e-4,
                      n_samples=100, seed=0, floor=1e-6) -> GradCheckReport:
    """Compare backprop against central differences of the end-to-end NLL_V.

    The loss is NLL_V with proportions = network output and fixed components.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    from .losses import nll_v_and_grad

    def loss_at():
        w = forward(state, cfg, img).weights
        return nll_v_and_grad(img.pixels, w, means, var)[0]

    w = forward(state, cfg, img).weights
    _, gw = nll_v_and_grad(img.pixels, w, means, var)
    grads = backward(state, cfg, img, gw)

    names = list(state.params)
    sizes = np.array([state.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    worst, worst_name = 0.0, ""
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[j]
        p = state.params[name].reshape(-1)
        i = flat - offsets[j]
        orig = p[i]
        p[i] = orig + step
        state.touch()
        up = loss_at()
        p[i] = orig - step
        state.touch()
        down = loss_at()
        p[i] = orig
        state.touch()
        numeric = (up - down) / (2 * step)
        analytic = grads[name].reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst:
            worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(float(worst), tolerance, step, len(picks), worst_name, bool(worst < tolerance))
