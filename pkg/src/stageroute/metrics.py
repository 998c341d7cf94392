"""Segmentation metrics: Dice, IoU, and 95th-percentile Hausdorff distance.

Conventions (all surfaced as flags in MetricsReport):
  - both masks empty: dice = iou = 1.0, hd95 = 0.0
  - exactly one mask empty: dice = iou = 0.0, hd95 = image diagonal length
  - boundary pixels: foreground pixels with at least one background
    4-neighbor, or on the image border
  - hd95 percentile: nearest rank, i.e. the ceil(0.95*n)-th smallest of the
    combined directed boundary-distance multiset
  - distances are in pixel units
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt):
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def iou(pred, gt):
    """|P & G| / |P | G|; 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return inter / union


def boundary_points(mask):
    """(row, col) coordinates of 4-connectivity boundary pixels."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def _diagonal(shape):
    h, w = shape
    return math.sqrt((h - 1) ** 2 + (w - 1) ** 2)


def hd95(pred, gt):
    """Nearest-rank 95th percentile of the symmetric boundary distances."""
    pred, gt = _check_pair(pred, gt)
    bp = boundary_points(pred)
    bg = boundary_points(gt)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return _diagonal(pred.shape)
    dr = bp[:, 0][:, None] - bg[:, 0][None, :]
    dc = bp[:, 1][:, None] - bg[:, 1][None, :]
    d = np.sqrt(dr * dr + dc * dc)
    combined = np.concatenate([d.min(axis=1), d.min(axis=0)])
    combined.sort()
    rank = math.ceil(0.95 * combined.size)
    return float(combined[rank - 1])


def hd95_bruteforce_oracle(pred, gt):
    """All-pairs scalar-loop hd95, sharing no code with the fast path."""
    pred, gt = _check_pair(pred, gt)
    h, w = pred.shape

    def boundary(mask):
        pts = []
        for r in range(h):
            for c in range(w):
                if not mask[r, c]:
                    continue
                if r == 0 or r == h - 1 or c == 0 or c == w - 1:
                    pts.append((r, c))
                    continue
                if (not mask[r - 1, c] or not mask[r + 1, c]
                        or not mask[r, c - 1] or not mask[r, c + 1]):
                    pts.append((r, c))
        return pts

    bp = boundary(pred)
    bg = boundary(gt)
    if not bp and not bg:
        return 0.0
    if not bp or not bg:
        return math.sqrt((h - 1) ** 2 + (w - 1) ** 2)

    def directed(src, dst):
        out = []
        for (r1, c1) in src:
            best = math.inf
            for (r2, c2) in dst:
                dr = r1 - r2
                dc = c1 - c2
                dist = math.sqrt(dr * dr + dc * dc)
                if dist < best:
                    best = dist
            out.append(best)
        return out

    combined = sorted(directed(bp, bg) + directed(bg, bp))
    rank = math.ceil(0.95 * len(combined))
    return combined[rank - 1]


@dataclass
class MetricsReport:
    """Per-class one-vs-rest metrics with foreground means.

    ``included_classes`` lists the classes entering the means (foreground
    only); per-class lists cover every class including background.
    """

    per_class_dice: list
    per_class_iou: list
    per_class_hd95: list
    mean_dice: float
    mean_iou: float
    mean_hd95: float
    included_classes: list
    flags: list = field(default_factory=list)


def evaluate_masks(pred_labels, gt_labels, num_classes) -> MetricsReport:
    """One-vs-rest metrics on a label map pair (argmax predictions)."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(
            f"label map shapes differ: {pred_labels.shape} vs {gt_labels.shape}")
    dices, ious, hds, flags = [], [], [], []
    for c in range(num_classes):
        p = pred_labels == c
        g = gt_labels == c
        np_, ng = int(p.sum()), int(g.sum())
        if np_ == 0 and ng == 0:
            flags.append(f"class {c}: both masks empty (dice=iou=1, hd95=0)")
        elif np_ == 0 or ng == 0:
            flags.append(f"class {c}: one mask empty (hd95=image diagonal)")
        dices.append(dice(p, g))
        ious.append(iou(p, g))
        hds.append(hd95(p, g))
    included = list(range(1, num_classes))
    return MetricsReport(
        per_class_dice=dices,
        per_class_iou=ious,
        per_class_hd95=hds,
        mean_dice=float(np.mean([dices[c] for c in included])),
        mean_iou=float(np.mean([ious[c] for c in included])),
        mean_hd95=float(np.mean([hds[c] for c in included])),
        included_classes=included,
        flags=flags,
    )
