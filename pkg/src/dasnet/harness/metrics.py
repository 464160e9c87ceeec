"""Segmentation and detection metrics: VOC-style mIoU, mask mAP, box recall."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..geometry import Box, iou

DEFAULT_THRESHOLDS = (0.5, 0.7)


@dataclass
class MiouResult:
    per_class: dict[int, float]  # classes absent from both pred and gt are left out
    mean: float


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts for labels 0..num_classes."""
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: pred {pred.shape} vs gt {gt.shape}")
    n = num_classes + 1
    p = np.asarray(pred, dtype=np.int64).ravel()
    g = np.asarray(gt, dtype=np.int64).ravel()
    for name, arr in (("pred", p), ("gt", g)):
        if arr.size and (arr.min() < 0 or arr.max() > num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes}]")
    inter = np.bincount(p[p == g], minlength=n)
    union = np.bincount(p, minlength=n) + np.bincount(g, minlength=n) - inter
    return inter, union


def eval_miou(preds: Sequence[np.ndarray] | np.ndarray, gts: Sequence[np.ndarray] | np.ndarray,
              num_classes: int) -> MiouResult:
    """Dataset-level IoU per class (background is class 0) and their mean.

    Counts are pooled over all images before dividing.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    inter = np.zeros(num_classes + 1, dtype=np.int64)
    union = np.zeros(num_classes + 1, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = confusion_counts(p, g, num_classes)
        inter += i
        union += u
    per = {c: float(inter[c] / union[c]) for c in range(num_classes + 1) if union[c] > 0}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return MiouResult(per, mean)


# --------------------------------------------------------------------------
# mask mAP

@dataclass(frozen=True)
class ScoredMask:
    label: int
    score: float
    mask: np.ndarray  # bool H×W


@dataclass(frozen=True)
class GtMask:
    label: int
    mask: np.ndarray


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if num_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope, then sum over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * env))


def match_predictions(preds: Sequence[Sequence[ScoredMask]], gts: Sequence[Sequence[GtMask]],
                      label: int, thresh: float) -> tuple[list[bool], int]:
    """Greedy matching for one class: TP flags in descending score order, and the gt count.

    Ties in score keep image order, then prediction order. Each prediction
    claims the unmatched gt of its image with the highest mask IoU when that
    IoU reaches ``thresh``.
    """
    order = []
    for i, ps in enumerate(preds):
        for j, p in enumerate(ps):
            if p.label == label:
                order.append((-float(p.score), i, j))
    order.sort()
    gt_idx = [[j for j, g in enumerate(gs) if g.label == label] for gs in gts]
    used = [set() for _ in gts]
    flags = []
    for _, i, j in order:
        best, best_iou = None, -1.0
        for gj in gt_idx[i]:
            if gj in used[i]:
                continue
            v = mask_iou(preds[i][j].mask, gts[i][gj].mask)
            if v > best_iou:
                best, best_iou = gj, v
        if best is not None and best_iou >= thresh:
            used[i].add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags, sum(len(g) for g in gt_idx)


def eval_map_r(preds: Sequence[Sequence[ScoredMask]], gts: Sequence[Sequence[GtMask]],
               thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               num_classes: int | None = None) -> dict[float, float]:
    """Mask mAP per IoU threshold, averaged over classes that have ground truth."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists vs {len(gts)} ground-truth lists")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold {t} outside (0, 1)")
    labels = {g.label for gs in gts for g in gs}
    if num_classes is not None:
        labels = {l for l in labels if 1 <= l <= num_classes}
    out = {}
    for t in thresholds:
        aps = []
        for label in sorted(labels):
            flags, ngt = match_predictions(preds, gts, label, t)
            aps.append(average_precision(flags, ngt))
        out[float(t)] = float(np.mean(aps)) if aps else 0.0
    return out


def detection_recall(dets: Sequence[Sequence[Box]], gts: Sequence[Sequence[Box]], thresh: float = 0.5) -> float:
    """Fraction of gt boxes with a same-class detection at IoU > thresh."""
    hit = total = 0
    for d, g in zip(dets, gts):
        for gt in g:
            total += 1
            hit += any(b.label == gt.label and iou(b, gt) > thresh for b in d)
    return hit / total if total else 1.0
