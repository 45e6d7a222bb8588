"""Dice scoring, label rearrangement and a boundary-length smoothness measure."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DomainMismatch, TooManyClasses
from .image import SegmentationMask

MAX_EXHAUSTIVE_CLASSES = 8


@dataclass(frozen=True)
class DiceReport:
    per_class: np.ndarray
    mean: float
    permutation: tuple

    def line(self, image_id="-", nll=None, boundary=None):
        """One delimited record: id, per-class Dice, mean, permutation, NLL, boundary length."""
        fields = [
            str(image_id),
            ",".join(f"{d:.6f}" for d in self.per_class),
            f"{self.mean:.6f}",
            ",".join(str(p) for p in self.permutation),
            "" if nll is None else f"{nll:.6f}",
            "" if boundary is None else str(boundary),
        ]
        return "\t".join(fields)


def _check_pair(pred, gt):
    if not pred.domain.same_as(gt.domain):
        raise DomainMismatch("prediction and ground truth live on different domains")


def _dice_from_counts(overlap, p_size, g_size):
    total = p_size + g_size
    if total == 0:
        return 1.0
    return 2.0 * overlap / total


def dice(pred: SegmentationMask, gt: SegmentationMask, k: int) -> float:
    _check_pair(pred, gt)
    p = pred.labels == k
    g = gt.labels == k
    return _dice_from_counts(int(np.count_nonzero(p & g)), int(p.sum()), int(g.sum()))


def overlap_table(pred, gt, k):
    """counts[i, j] = number of pixels with pred label i and gt label j."""
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (pred.labels, gt.labels), 1)
    return counts


def per_class_dice(pred, gt, k):
    _check_pair(pred, gt)
    return np.array([dice(pred, gt, c) for c in range(k)])


def best_permutation_dice(pred: SegmentationMask, gt: SegmentationMask, k: int) -> DiceReport:
    """Relabel ``pred`` to maximize mean per-class Dice; exhaustive over k! maps.

    ``permutation[i]`` is the new label given to predicted label ``i``. Among
    equally good maps the first in lexicographic order wins, so the identity
    is kept whenever it is optimal.
    """
    _check_pair(pred, gt)
    if k > MAX_EXHAUSTIVE_CLASSES:
        raise TooManyClasses(f"exhaustive relabeling supports at most {MAX_EXHAUSTIVE_CLASSES} classes")
    counts = overlap_table(pred, gt, k)
    p_size = counts.sum(axis=1)
    g_size = counts.sum(axis=0)
    # score[i, j]: Dice of gt class j if predicted label i is renamed j
    total = p_size[:, None] + g_size[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(total == 0, 1.0, 2.0 * counts / np.where(total == 0, 1, total))
    best, best_perm = -1.0, None
    cols = np.arange(k)
    for perm in itertools.permutations(range(k)):
        s = score[np.asarray(perm), cols].sum()
        if s > best + 1e-12:
            best, best_perm = s, perm
    # best_perm[j] = predicted label mapped onto gt class j; invert to label -> new label
    mapping = np.empty(k, dtype=np.int64)
    mapping[np.asarray(best_perm)] = cols
    per_class = per_class_dice(pred.relabel(mapping), gt, k)
    return DiceReport(per_class, float(per_class.mean()), tuple(int(v) for v in mapping))


def identity_dice(pred, gt, k):
    per_class = per_class_dice(pred, gt, k)
    return DiceReport(per_class, float(per_class.mean()), tuple(range(k)))


def boundary_length(mask: SegmentationMask) -> int:
    """Number of 4-neighbour pixel pairs inside the ROI with different labels."""
    grid = mask.to_grid(fill=-1)
    roi = mask.domain.roi
    horiz = roi[:, 1:] & roi[:, :-1] & (grid[:, 1:] != grid[:, :-1])
    vert = roi[1:, :] & roi[:-1, :] & (grid[1:, :] != grid[:-1, :])
    return int(horiz.sum() + vert.sum())


def match_means(estimated, truth):
    """Permutation of estimated component rows minimizing the L-inf distance to ``truth``.

    Returns ``(order, distance)`` where ``estimated[order]`` lines up with ``truth``.
    """
    estimated = np.atleast_2d(estimated)
    truth = np.atleast_2d(truth)
    k = truth.shape[0]
    best, best_order = np.inf, None
    for order in itertools.permutations(range(k)):
        d = np.abs(estimated[list(order)] - truth).max()
        if d < best:
            best, best_order = d, order
    return np.asarray(best_order), float(best)
