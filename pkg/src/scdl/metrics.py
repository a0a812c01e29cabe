"""Dice similarity and average surface distance on 2-D label maps."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dice(pred, gt):
    """2|P & G| / (|P| + |G|); two empty maps score 1.0."""
    pred, gt = _check(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask):
    """Set pixels with a 4-neighbour outside the set or off the image."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_CONN, border_value=0)
    return mask & ~eroded


def asd_sentinel(shape):
    return float(np.hypot(*shape))


def asd(pred, gt):
    """Symmetric mean nearest-boundary distance, in pixels.

    Both empty gives 0.0; exactly one empty gives the image-diagonal sentinel.
    """
    pred, gt = _check(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ == 0 and ng == 0:
        return 0.0
    if np_ == 0 or ng == 0:
        return asd_sentinel(pred.shape)
    # distance from every pixel to the nearest boundary pixel of the other map
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return float((to_g[bp].sum() + to_p[bg].sum()) / (np_ + ng))


@dataclass
class ClassMetrics:
    dice: np.ndarray
    asd: np.ndarray
    valid: np.ndarray  # False where ASD fell back to the sentinel


def class_metrics(pred, gt, num_classes):
    """Per-class Dice and ASD for integer label maps."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    d = np.zeros(num_classes)
    a = np.zeros(num_classes)
    valid = np.ones(num_classes, dtype=bool)
    for c in range(num_classes):
        p, g = pred == c, gt == c
        d[c] = dice(p, g)
        a[c] = asd(p, g)
        valid[c] = p.any() == g.any()
    return ClassMetrics(d, a, valid)
