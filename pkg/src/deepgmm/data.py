"""Tensor container I/O, sample manifests and the synthetic image generator.

Tensor file layout (little-endian)::

    magic    4 bytes   b"DGMM"
    version  uint32    1
    dtype    uint8     1 = float64, 2 = uint8
    ndim     uint32
    dims     ndim x uint32
    payload  row-major values

Images are stored as float64 (m, H, W), masks as uint8 (H, W) with 255 outside
the ROI, ROIs as uint8 (H, W) of 0/1. A manifest is a text file of
``key=value`` lines (``image=``, ``mask=``, ``roi=``) with paths relative to
the manifest's directory.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadVersion,
    IoError,
    SpecInvalid,
    TrailingBytes,
    TruncatedPayload,
    UnsupportedDtype,
)
from .image import MultiChannelImage, PixelDomain, SegmentationMask

MAGIC = b"DGMM"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
OUTSIDE_LABEL = 255


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.dtype.kind == "f" and array.dtype.itemsize == 8:
        code = 1
    elif array.dtype.kind == "u" and array.dtype.itemsize == 1:
        code = 2
    else:
        raise UnsupportedDtype(f"cannot store dtype {array.dtype}")
    header = MAGIC + struct.pack("<IBI", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    if len(buf) < 13:
        raise TruncatedPayload("header truncated")
    version, code, ndim = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if code not in DTYPES:
        raise UnsupportedDtype(f"unknown dtype code {code}")
    off = 13
    if len(buf) < off + 4 * ndim:
        raise TruncatedPayload("dimension table truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    got = len(buf) - off
    if got < expected:
        raise TruncatedPayload(f"payload has {got} bytes, expected {expected}")
    if got > expected:
        raise TrailingBytes(f"payload has {got} bytes, expected {expected}")
    out = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=off)
    return out.reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, array):
    data = encode_tensor(array)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    return decode_tensor(buf)


# ---------------------------------------------------------------- key=value files


def parse_kv(text):
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SpecInvalid(f"expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_kv(path):
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def write_kv(path, items):
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------- samples


def save_sample(out_dir, img: MultiChannelImage, mask: SegmentationMask | None = None, name="sample"):
    """Write image, ROI and optional ground-truth mask plus a manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc.strerror}") from exc
    items = {"image": f"{name}_image.dgmm", "roi": f"{name}_roi.dgmm"}
    write_tensor(out_dir / items["image"], img.values)
    write_tensor(out_dir / items["roi"], img.domain.roi.astype(np.uint8))
    if mask is not None:
        items["mask"] = f"{name}_mask.dgmm"
        write_mask(out_dir / items["mask"], mask)
    manifest = out_dir / f"{name}.manifest"
    write_kv(manifest, items)
    return manifest


def write_mask(path, mask: SegmentationMask):
    write_tensor(path, mask.to_grid(fill=OUTSIDE_LABEL).astype(np.uint8))


def read_mask(path, domain: PixelDomain, classes: int) -> SegmentationMask:
    grid = read_tensor(path)
    if grid.shape != domain.shape:
        raise SpecInvalid(f"mask {path} has shape {grid.shape}, expected {domain.shape}")
    return SegmentationMask.from_grid(grid.astype(np.int64), domain, classes)


def mask_domain(grid):
    """Domain implied by a stored mask: every pixel not marked as outside."""
    return PixelDomain(np.asarray(grid) != OUTSIDE_LABEL)


def load_sample(manifest, classes=None):
    """Read a manifest; returns ``(image, mask)`` with mask None when absent."""
    manifest = Path(manifest)
    items = read_kv(manifest)
    base = manifest.parent
    if "image" not in items:
        raise SpecInvalid(f"manifest {manifest} has no image entry")
    values = read_tensor(base / items["image"])
    if values.ndim == 2:
        values = values[None]
    roi = read_tensor(base / items["roi"]).astype(bool) if "roi" in items else None
    img = MultiChannelImage.from_array(values, roi)
    mask = None
    if "mask" in items:
        grid = read_tensor(base / items["mask"]).astype(np.int64)
        k = classes if classes is not None else int(grid[img.domain.roi].max()) + 1
        mask = SegmentationMask.from_grid(grid, img.domain, k)
    return img, mask


# ---------------------------------------------------------------- synthetic data

PATTERNS = ("voronoi_blobs", "nested_rings", "half_planes")


@dataclass
class SyntheticSpec:
    classes: int
    channels: int
    height: int
    width: int
    means: np.ndarray
    stds: np.ndarray
    pattern: str = "voronoi_blobs"
    noise: float = 0.0
    seed: int = 0
    roi: str = "full"

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=np.float64))
        self.validate()

    def validate(self):
        k, m = self.classes, self.channels
        if k < 2 or m < 1 or self.height < 2 or self.width < 2:
            raise SpecInvalid("need classes >= 2, channels >= 1 and a grid of at least 2x2")
        if self.means.shape != (k, m) or self.stds.shape != (k, m):
            raise SpecInvalid(f"means and stds must be {k}x{m}")
        if not (self.stds > 0).all():
            raise SpecInvalid("stds must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise SpecInvalid("label-flip probability must lie in [0, 0.5)")
        if self.pattern not in PATTERNS:
            raise SpecInvalid(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if self.roi not in ("full", "disk"):
            raise SpecInvalid("roi must be 'full' or 'disk'")

    @classmethod
    def from_kv(cls, items):
        def matrix(text):
            return np.array([[float(v) for v in row.split(",")] for row in text.split(";")])

        try:
            return cls(
                classes=int(items["classes"]),
                channels=int(items.get("channels", 1)),
                height=int(items["height"]),
                width=int(items["width"]),
                means=matrix(items["means"]),
                stds=matrix(items["stds"]),
                pattern=items.get("pattern", "voronoi_blobs"),
                noise=float(items.get("noise", 0.0)),
                seed=int(items.get("seed", 0)),
                roi=items.get("roi", "full"),
            )
        except KeyError as exc:
            raise SpecInvalid(f"missing field {exc.args[0]}") from exc
        except ValueError as exc:
            raise SpecInvalid(str(exc)) from exc

    def to_kv(self):
        def fmt(a):
            return ";".join(",".join(repr(float(v)) for v in row) for row in a)

        return {
            "classes": self.classes, "channels": self.channels,
            "height": self.height, "width": self.width,
            "means": fmt(self.means), "stds": fmt(self.stds),
            "pattern": self.pattern, "noise": self.noise, "seed": self.seed, "roi": self.roi,
        }


def _roi_grid(spec):
    if spec.roi == "full":
        return np.ones((spec.height, spec.width), dtype=bool)
    yy, xx = np.mgrid[: spec.height, : spec.width]
    cy, cx = (spec.height - 1) / 2, (spec.width - 1) / 2
    r = min(spec.height, spec.width) / 2
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def ring_edges(spec):
    """Outer radius of each ring but the last; the last class fills the rest."""
    r_max = 0.95 * min(spec.height, spec.width) / 2
    return r_max * np.arange(1, spec.classes) / spec.classes


def _layout(spec, rng):
    h, w, k = spec.height, spec.width, spec.classes
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    if spec.pattern == "voronoi_blobs":
        n_seeds = 2 * k
        pts = rng.uniform([0, 0], [h, w], size=(n_seeds, 2))
        owner = rng.permutation(np.arange(n_seeds) % k)
        d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
        return owner[np.argmin(d, axis=-1)]
    if spec.pattern == "nested_rings":
        cy = (h - 1) / 2 + rng.uniform(-0.5, 0.5)
        cx = (w - 1) / 2 + rng.uniform(-0.5, 0.5)
        r = np.hypot(yy - cy, xx - cx)
        return np.searchsorted(ring_edges(spec), r, side="right")
    theta = rng.uniform(0, np.pi)
    proj = yy * np.sin(theta) + xx * np.cos(theta)
    lo, hi = proj.min(), proj.max()
    band = np.floor((proj - lo) / (hi - lo + 1e-12) * k).astype(np.int64)
    return np.clip(band, 0, k - 1)


def generate_synthetic(spec: SyntheticSpec):
    """Draw a label layout, flip label sources with probability ``noise``, sample pixels.

    The recorded ground truth is the clean layout; only the classes used to
    draw pixel values are flipped, giving outlier pixels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    roi = _roi_grid(spec)
    layout = _layout(spec, rng)
    domain = PixelDomain(roi)
    gt = domain.flatten(layout)
    counts = np.bincount(gt, minlength=spec.classes)
    if (counts == 0).any():
        raise SpecInvalid(f"class(es) {np.flatnonzero(counts == 0).tolist()} have zero area")
    n = domain.n_pixels
    source = gt.copy()
    flip = rng.random(n) < spec.noise
    source[flip] = (gt[flip] + rng.integers(1, spec.classes, size=int(flip.sum()))) % spec.classes
    values = spec.means[source] + spec.stds[source] * rng.normal(size=(n, spec.channels))
    img = MultiChannelImage(domain, domain.unflatten(values, fill=0.0))
    return img, SegmentationMask(domain, gt, spec.classes)


def separated_spec(classes=2, channels=1, size=64, gap=10.0, seed=0, noise=0.0,
                   pattern="voronoi_blobs", std=1.0, roi="full"):
    """Convenience spec: class means ``gap`` stds apart along every channel."""
    means = gap * std * np.tile(np.arange(classes, dtype=np.float64)[:, None], (1, channels))
    stds = np.full((classes, channels), std)
    return SyntheticSpec(classes, channels, size, size, means, stds, pattern, noise, seed, roi)


def ensure_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise IoError(f"{path} is not writable")
    return path
