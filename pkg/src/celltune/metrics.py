"""Instance-level evaluation: IoU matching, AP, AJI, pixel/object F1.

AP here is the detection-free convention TP / (TP + FP + FN) after
one-to-one IoU-thresholded matching (maximizing total matched IoU), not
ranked detection AP. Dataset AP averages per-image AP.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ShapeError, validate_mask


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple  # ((pred_id, gt_id, iou), ...) matched at the threshold


def _sizes_and_overlap(pred, gt):
    pred = validate_mask(pred)
    gt = validate_mask(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    n_pred = int(pred.max(initial=0))
    n_gt = int(gt.max(initial=0))
    joint = pred.astype(np.int64).ravel() * (n_gt + 1) + gt.astype(np.int64).ravel()
    counts = np.bincount(joint, minlength=(n_pred + 1) * (n_gt + 1))
    overlap = counts.reshape(n_pred + 1, n_gt + 1)
    pred_sizes = overlap.sum(axis=1)
    gt_sizes = overlap.sum(axis=0)
    return overlap, pred_sizes, gt_sizes


def instance_iou_matrix(pred, gt):
    """(n_pred, n_gt) IoU matrix over instance pixel sets (background
    excluded); row i is pred id i+1, column j is gt id j+1."""
    overlap, pred_sizes, gt_sizes = _sizes_and_overlap(pred, gt)
    inter = overlap[1:, 1:].astype(np.float64)
    union = (pred_sizes[1:, None] + gt_sizes[None, 1:]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def match_instances(pred, gt, iou_threshold=0.5):
    """One-to-one matching maximizing total matched IoU among pairs at
    or above the threshold (optimal assignment)."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {iou_threshold}")
    iou = instance_iou_matrix(pred, gt)
    n_pred, n_gt = iou.shape
    admissible = iou >= iou_threshold
    score = np.where(admissible, iou, 0.0)
    pairs = []
    if n_pred and n_gt and admissible.any():
        rows, cols = linear_sum_assignment(score, maximize=True)
        for r, c in zip(rows, cols):
            if admissible[r, c]:
                pairs.append((int(r + 1), int(c + 1), float(iou[r, c])))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=n_pred - tp, fn=n_gt - tp,
                       pairs=tuple(pairs))


def average_precision(pred, gt, thresholds=(0.5,)):
    """AP(t) = TP / (TP + FP + FN) per threshold; an image with no gt
    scores 1.0 when the prediction is also empty, else 0.0."""
    out = []
    for t in thresholds:
        res = match_instances(pred, gt, t)
        denom = res.tp + res.fp + res.fn
        out.append(1.0 if denom == 0 else res.tp / denom)
    return out


def aji(pred, gt):
    """Aggregated Jaccard index.

    Ground-truth instances in ascending id order greedily claim the
    still-unused prediction with the highest IoU (ties to the lower
    pred id; IoU 0 claims nothing). Unused prediction pixels inflate
    the denominator.
    """
    overlap, pred_sizes, gt_sizes = _sizes_and_overlap(pred, gt)
    n_pred = overlap.shape[0] - 1
    n_gt = overlap.shape[1] - 1
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    used = np.zeros(n_pred + 1, bool)
    num = 0
    den = 0
    for j in range(1, n_gt + 1):
        best_i = 0
        best_iou = 0.0
        for i in np.nonzero(overlap[:, j])[0]:
            if i == 0 or used[i]:
                continue
            inter = overlap[i, j]
            union = pred_sizes[i] + gt_sizes[j] - inter
            v = inter / union
            if v > best_iou:
                best_iou = v
                best_i = i
        if best_i:
            used[best_i] = True
            num += overlap[best_i, j]
            den += pred_sizes[best_i] + gt_sizes[j] - overlap[best_i, j]
        else:
            den += gt_sizes[j]
    den += pred_sizes[1:][~used[1:]].sum()
    return float(num / den) if den else 1.0


def pixel_f1(pred, gt):
    """Binary foreground F1 over pixels."""
    p = validate_mask(pred) > 0
    g = validate_mask(gt) > 0
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def object_f1(pred, gt, iou_threshold=0.5):
    """F1 over matched instances at the IoU threshold."""
    res = match_instances(pred, gt, iou_threshold)
    denom = 2 * res.tp + res.fp + res.fn
    if denom == 0:
        return 1.0
    return 2.0 * res.tp / denom
