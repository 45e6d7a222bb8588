"""Core value types: pixel domains, multi-channel images, responsibilities, masks.

All per-pixel containers index the region of interest (ROI) pixels in
row-major order, so a ``(n_pixels, ...)`` array lines up with
``np.flatnonzero(domain.roi)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, DomainMismatch, ShapeError, ZeroVariance

ROW_SUM_TOL = 1e-9


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PixelDomain:
    """Rectangular grid with a boolean ROI marking the pixels that take part."""

    roi: np.ndarray

    def __post_init__(self):
        roi = np.asarray(self.roi)
        if roi.ndim != 2 or roi.shape[0] < 1 or roi.shape[1] < 1:
            raise ShapeError(f"roi must be a non-empty 2-D grid, got shape {roi.shape}")
        roi = roi.astype(bool)
        if not roi.any():
            raise ShapeError("roi selects no pixels")
        object.__setattr__(self, "roi", _frozen(roi))

    @classmethod
    def full(cls, height, width):
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self):
        return self.roi.shape[0]

    @property
    def width(self):
        return self.roi.shape[1]

    @property
    def shape(self):
        return self.roi.shape

    @cached_property
    def n_pixels(self):
        return int(self.roi.sum())

    @cached_property
    def flat_index(self):
        return _frozen(np.flatnonzero(self.roi))

    def same_as(self, other):
        return self is other or (
            self.shape == other.shape and bool(np.array_equal(self.roi, other.roi))
        )

    def flatten(self, grid):
        """(..., H, W) grid -> (n_pixels, ...) ROI values."""
        grid = np.asarray(grid)
        if grid.shape[-2:] != self.shape:
            raise ShapeError(f"grid shape {grid.shape} does not end in {self.shape}")
        lead = grid.shape[:-2]
        flat = grid.reshape(lead + (-1,))[..., self.flat_index]
        return np.moveaxis(flat, -1, 0) if lead else flat

    def unflatten(self, values, fill=0):
        """(n_pixels, ...) ROI values -> (..., H, W) grid, ``fill`` outside the ROI."""
        values = np.asarray(values)
        if values.shape[0] != self.n_pixels:
            raise ShapeError(f"expected {self.n_pixels} rows, got {values.shape[0]}")
        lead = values.shape[1:]
        out = np.full(lead + (self.height * self.width,), fill, dtype=values.dtype)
        out[..., self.flat_index] = np.moveaxis(values, 0, -1) if lead else values
        return out.reshape(lead + self.shape)


@dataclass(frozen=True, eq=False)
class MultiChannelImage:
    """m co-registered channels over a pixel domain; values shaped (m, H, W)."""

    domain: PixelDomain
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[0] < 1:
            raise ShapeError(f"image values must be (m, H, W), got {values.shape}")
        if values.shape[1:] != self.domain.shape:
            raise ShapeError(
                f"image grid {values.shape[1:]} does not match domain {self.domain.shape}"
            )
        if not np.isfinite(values[:, self.domain.roi]).all():
            raise ValueError("image has non-finite values inside the roi")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def from_array(cls, values, roi=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if roi is None:
            roi = np.ones(values.shape[1:], dtype=bool)
        return cls(PixelDomain(roi), values)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def n_pixels(self):
        return self.domain.n_pixels

    @cached_property
    def pixels(self):
        """ROI observations as an (n_pixels, m) array."""
        return _frozen(self.domain.flatten(self.values))


def check_label_count(k):
    k = int(k)
    if k < 2:
        raise ValueError(f"need at least two classes, got {k}")
    return k


@dataclass(frozen=True, eq=False)
class ResponsibilityField:
    """Per-pixel class weights, (n_pixels, K), each row on the simplex."""

    domain: PixelDomain
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != self.domain.n_pixels:
            raise ShapeError(
                f"weights must be ({self.domain.n_pixels}, K), got {w.shape}"
            )
        if not np.isfinite(w).all() or w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("responsibilities must lie in [0, 1]")
        if np.abs(w.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("responsibility rows must sum to 1")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def classes(self):
        return self.weights.shape[1]

    def to_grid(self):
        """(K, H, W) grid with zeros outside the ROI."""
        return self.domain.unflatten(self.weights, fill=0.0)


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Integer label per ROI pixel."""

    domain: PixelDomain
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != (self.domain.n_pixels,):
            raise ShapeError(f"expected {self.domain.n_pixels} labels, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise ValueError(f"labels must lie in 0..{self.classes - 1}")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    @classmethod
    def from_grid(cls, grid, domain, classes):
        return cls(domain, domain.flatten(np.asarray(grid)), classes)

    def to_grid(self, fill=255):
        return self.domain.unflatten(self.labels.astype(np.int64), fill=fill)

    def relabel(self, permutation):
        return SegmentationMask(self.domain, np.asarray(permutation)[self.labels], self.classes)


def argmax_labeling(w: ResponsibilityField) -> SegmentationMask:
    # np.argmax returns the first maximum, i.e. ties go to the smallest index
    return SegmentationMask(w.domain, np.argmax(w.weights, axis=1), w.classes)


def normalize_image(img: MultiChannelImage) -> MultiChannelImage:
    """Zero mean and unit population std per channel over the ROI; 0 elsewhere."""
    x = img.pixels
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = np.ptp(x, axis=0) == 0
    if flat.any() or (std == 0).any():
        bad = np.flatnonzero(flat | (std == 0)).tolist()
        raise ZeroVariance(f"channel(s) {bad} are constant over the roi")
    return MultiChannelImage(img.domain, img.domain.unflatten((x - mean) / std, fill=0.0))


def require_same_domain(a, b):
    if not a.same_as(b):
        raise DomainMismatch("pixel domains differ")


def require_channels(img, m):
    if img.channels != m:
        raise DimensionMismatch(f"image has {img.channels} channels, parameters expect {m}")
