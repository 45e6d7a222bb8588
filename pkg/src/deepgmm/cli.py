"""Command-line front end: synth, fit, train, predict, eval, mu-data.

Settings come from an optional ``--config`` key=value file; explicit flags win.
Each command prints one tab-delimited ``key=value`` metrics record to stdout.
Errors go to stderr as ``ERROR:<code>: message`` with exit status 1.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import load_checkpoint, save_checkpoint
from .deep_em import DeepFitOptions, deep_fit_single, deep_train_multi, estimate_mu_data, predict
from .errors import ConfigError, DeepGMMError, DomainMismatch, HeterogeneousChannels, IoError
from .evaluation import best_permutation_dice, boundary_length, identity_dice
from .gmm import EMOptions, em_fit
from .image import PixelDomain, SegmentationMask, argmax_labeling, normalize_image
from .network import NetworkConfig
from .svgmm import em_fit_v

METHODS = ("gmm", "svgmm", "deepg", "deepsvg")
DEEP_ONLY = ("lr", "lam", "mu_data", "depth", "width")

# config-file key -> (attribute, type)
CONFIG_KEYS = {
    "method": ("method", str), "classes": ("classes", int), "seed": ("seed", int),
    "threshold": ("threshold", float), "max_iters": ("max_iters", int),
    "max_steps": ("max_iters", int), "lr": ("lr", float), "lambda": ("lam", float),
    "mu_data": ("mu_data", str), "depth": ("depth", int), "width": ("width", int),
    "n_init": ("n_init", int), "window": ("window", int),
}


@dataclass
class RunConfig:
    method: str | None = None
    classes: int | None = None
    seed: int = 0
    threshold: float = 1e-3
    max_iters: int | None = None
    lr: float = 1e-3
    lam: float = 0.0
    mu_data: str | None = None
    depth: int = 3
    width: int = 16
    n_init: int = 1
    window: int = 20
    explicit: set = field(default_factory=set)

    @property
    def deep(self):
        return self.method in ("deepg", "deepsvg")

    def validate(self, allowed=METHODS):
        if self.method not in allowed:
            raise ConfigError(f"--method must be one of {', '.join(allowed)}")
        if self.classes is None or self.classes < 2:
            raise ConfigError("--classes must be given and >= 2")
        if self.threshold <= 0:
            raise ConfigError("--threshold must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("--max-iters must be >= 1")
        if not self.deep:
            stray = sorted(self.explicit & set(DEEP_ONLY))
            if stray:
                raise ConfigError(f"options used only by deep methods: {', '.join(stray)}")
        if self.lr <= 0:
            raise ConfigError("--lr must be positive")
        if self.lam != 0 and self.mu_data is None:
            raise ConfigError("--lambda != 0 requires --mu-data")
        if self.depth < 1 or self.width < 1:
            raise ConfigError("--depth and --width must be >= 1")
        return self

    def em_options(self):
        return EMOptions(threshold=self.threshold, max_iters=self.max_iters or 500, n_init=self.n_init)

    def deep_options(self, mu_data=None):
        variant = "deepG" if self.method == "deepg" else "deepSVG"
        return DeepFitOptions(variant=variant, lr=self.lr, threshold=self.threshold,
                              max_steps=self.max_iters or 5000, window=self.window,
                              lam=self.lam, mu_data=mu_data)

    def net_config(self, channels):
        return NetworkConfig(channels, self.classes, depth=self.depth, base_width=self.width)


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, raw in data.read_kv(args.config).items():
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r} in {args.config}")
            attr, typ = CONFIG_KEYS[key]
            try:
                setattr(cfg, attr, typ(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            cfg.explicit.add(attr)
    for attr in ("method", "classes", "seed", "threshold", "max_iters", "lr", "lam",
                 "mu_data", "depth", "width", "n_init", "window"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
            cfg.explicit.add(attr)
    return cfg


def emit(**fields):
    print("\t".join(f"{k}={_fmt(v)}" for k, v in fields.items()))


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _load_image(manifest):
    img, _ = data.load_sample(manifest)
    return normalize_image(img)


def _load_mu_data(path, k, m):
    mu = data.read_tensor(path)
    if mu.ndim == 1:
        mu = mu[:, None]
    if mu.shape != (k, m):
        raise ConfigError(f"mu_data {path} has shape {mu.shape}, expected {(k, m)}")
    return mu.astype(np.float64)


def _fmt_matrix(a):
    return ";".join(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(a))


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    spec = data.SyntheticSpec.from_kv(data.read_kv(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    img, gt = data.generate_synthetic(spec)
    manifest = data.save_sample(args.out, img, gt, name=args.name)
    emit(command="synth", seed=spec.seed, manifest=manifest)


def cmd_fit(args):
    cfg = build_config(args).validate()
    img = _load_image(args.manifest)
    k = cfg.classes
    mu = _load_mu_data(cfg.mu_data, k, img.channels) if cfg.mu_data else None
    out = data.ensure_dir(args.out)
    t0 = time.perf_counter()
    params = {"method": cfg.method, "classes": k, "channels": img.channels}
    if cfg.method == "gmm":
        fit = em_fit(img, k, seed=cfg.seed, opts=cfg.em_options())
        mask = argmax_labeling(fit.responsibilities)
        loss, steps, converged, trace = fit.nll_trace[-1], fit.n_iter, fit.converged, fit.nll_trace
        params["weights"] = ",".join(repr(float(v)) for v in fit.params.weights)
        p = fit.params
    elif cfg.method == "svgmm":
        fit = em_fit_v(img, k, seed=cfg.seed, opts=cfg.em_options())
        mask = fit.mask
        loss, steps, converged, trace = fit.nll_trace[-1], fit.n_iter, fit.converged, fit.nll_trace
        p = fit.params
        data.write_tensor(out / "proportions.dgmm", fit.responsibilities.to_grid())
    else:
        fit = deep_fit_single(img, k, cfg.net_config(img.channels), seed=cfg.seed,
                              opts=cfg.deep_options(mu))
        mask = fit.mask
        loss, steps, converged = fit.final_loss.total, fit.steps, fit.converged
        trace = [r.line() for r in fit.trace]
        p = fit.params
        if cfg.method == "deepg":
            params["weights"] = ",".join(repr(float(v)) for v in p.weights)
        else:
            data.write_tensor(out / "proportions.dgmm", fit.responsibilities.to_grid())
    seconds = time.perf_counter() - t0
    params["means"] = _fmt_matrix(p.means)
    params["var"] = _fmt_matrix(p.var)
    data.write_kv(out / "params.txt", params)
    data.write_mask(out / "mask.dgmm", mask)
    _write_trace(out / "trace.txt", trace)
    emit(command="fit", method=cfg.method, loss=float(loss), steps=steps,
         converged=bool(converged), seconds=seconds, mask=out / "mask.dgmm")


def _write_trace(path, trace):
    lines = [r if isinstance(r, str) else f"{i + 1}\t{float(r):.12g}" for i, r in enumerate(trace)]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def cmd_train(args):
    cfg = build_config(args)
    if cfg.method is None:
        cfg.method = "deepsvg"
    cfg.validate(allowed=("deepg", "deepsvg"))
    if not args.manifests:
        raise ConfigError("need at least one training manifest")
    images = [_load_image(m) for m in args.manifests]
    if len({img.channels for img in images}) > 1:
        raise HeterogeneousChannels("training images differ in channel count")
    m = images[0].channels
    mu = _load_mu_data(cfg.mu_data, cfg.classes, m) if cfg.mu_data else None
    net = cfg.net_config(m)
    t0 = time.perf_counter()
    fit = deep_train_multi(images, cfg.classes, net, seed=cfg.seed, opts=cfg.deep_options(mu))
    seconds = time.perf_counter() - t0
    path = save_checkpoint(args.out, fit.state, net)
    _write_trace(Path(args.out) / "trace.txt", [r.line() for r in fit.trace])
    emit(command="train", method=cfg.method, images=len(images), loss=fit.final_loss.total,
         penalty=fit.final_loss.penalty, steps=fit.steps, converged=fit.converged,
         seconds=seconds, checkpoint=path)


def cmd_predict(args):
    state, net = load_checkpoint(args.checkpoint)
    img = _load_image(args.manifest)
    out = data.ensure_dir(args.out)
    t0 = time.perf_counter()
    w, mask = predict(state, net, img)
    seconds = time.perf_counter() - t0
    data.write_mask(out / "mask.dgmm", mask)
    if args.responsibilities:
        data.write_tensor(out / "responsibilities.dgmm", w.to_grid())
    emit(command="predict", seconds=seconds, mask=out / "mask.dgmm")


def _read_mask_grid(path):
    grid = data.read_tensor(path)
    if grid.ndim != 2 or grid.dtype != np.uint8:
        raise DomainMismatch(f"{path} is not a 2-D label mask")
    return grid


def cmd_eval(args):
    pred_grid = _read_mask_grid(args.pred)
    gt_grid = _read_mask_grid(args.gt)
    if pred_grid.shape != gt_grid.shape:
        raise DomainMismatch(f"mask shapes differ: {pred_grid.shape} vs {gt_grid.shape}")
    domain = data.mask_domain(gt_grid)
    if not PixelDomain(pred_grid != data.OUTSIDE_LABEL).same_as(domain):
        raise DomainMismatch("masks cover different ROIs")
    roi = domain.roi
    k = args.classes or int(max(pred_grid[roi].max(), gt_grid[roi].max())) + 1
    pred = SegmentationMask.from_grid(pred_grid.astype(np.int64), domain, k)
    gt = SegmentationMask.from_grid(gt_grid.astype(np.int64), domain, k)
    report = best_permutation_dice(pred, gt, k) if args.rearrange else identity_dice(pred, gt, k)
    emit(command="eval", dice=",".join(f"{d:.6f}" for d in report.per_class),
         mean=f"{report.mean:.6f}", permutation=",".join(map(str, report.permutation)),
         boundary=boundary_length(pred))


def cmd_mu_data(args):
    samples = []
    for m in args.manifests:
        img, gt = data.load_sample(m, classes=args.classes)
        if gt is None:
            raise ConfigError(f"{m} has no ground-truth mask")
        samples.append((normalize_image(img), gt))
    mu = estimate_mu_data(samples, args.n_images, seed=args.seed)
    data.write_tensor(args.out, mu)
    emit(command="mu-data", images=len(samples), mu=_fmt_matrix(mu), out=args.out)


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_run_flags(p, deep_defaults=False):
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int,
                   help="EM iterations or deep gradient steps")
    p.add_argument("--n-init", dest="n_init", type=int, help="EM random restarts")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu-data", dest="mu_data", help="tensor file of reference class means (K x m)")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--window", type=int, help="convergence window for deep methods")
    p.add_argument("--out", required=True)


def build_parser():
    parser = _Parser(prog="deepgmm", description="GMM / SVGMM / deepG / deepSVG image segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic image with ground truth")
    p.add_argument("spec", help="key=value generator spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--name", default="synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="segment one image")
    p.add_argument("manifest")
    _add_run_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train one network on several images")
    p.add_argument("manifests", nargs="*")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a trained network")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--responsibilities", action="store_true", help="also write class probabilities")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="Dice and boundary length of a mask against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--classes", type=int)
    p.add_argument("--rearrange", action="store_true", help="use the Dice-optimal label permutation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mu-data", help="reference class means from labelled images")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mu_data)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except DeepGMMError as exc:
        print(f"ERROR:{exc.code}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
