"""Brute-force reference implementations used by the tests.

Each one is written with explicit loops over plain Python values and shares no
code with the package beyond the Box type.
"""

import math

import numpy as np


def box_iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms(coords, scores, thresh):
    """Quadratic greedy NMS: repeatedly take the best remaining box and drop its overlaps."""
    remaining = list(range(len(scores)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        kept.append(best)
        remaining = [i for i in remaining if i != best and box_iou(coords[i], coords[best]) <= thresh]
    return kept


def match(cands, gts, thresh, force_best):
    out = []
    for c in cands:
        best, best_v = None, -1.0
        for j, g in enumerate(gts):
            v = box_iou(c, g)
            if v > best_v:
                best, best_v = j, v
        out.append(best if best is not None and best_v > thresh else None)
    if force_best:
        for j, g in enumerate(gts):
            best, best_v = None, 0.0
            for i, c in enumerate(cands):
                v = box_iou(c, g)
                if v > best_v:
                    best, best_v = i, v
            if best is not None:
                out[best] = j
    return out


def cell_kept(cell, n, lo, hi):
    """Cell ``cell`` of ``n`` overlaps the open interval (n·lo, n·hi)."""
    return cell < n * hi and cell + 1 > n * lo


def attention_mask(boxes, h, w):
    keep = np.zeros((h, w), dtype=bool)
    for b in boxes:
        for y in range(h):
            for x in range(w):
                if cell_kept(x, w, b.x_min, b.x_max) and cell_kept(y, h, b.y_min, b.y_max):
                    keep[y, x] = True
    return keep


def roi_rect(box, h, w):
    xs = [x for x in range(w) if cell_kept(x, w, box.x_min, box.x_max)]
    ys = [y for y in range(h) if cell_kept(y, h, box.y_min, box.y_max)]
    return ys[0], ys[-1] + 1, xs[0], xs[-1] + 1


def assemble(maps, box, k):
    """Per-pixel double loop: pixel (y, x) of the ROI reads the channels of cell (k·y//h, k·x//w)."""
    _, h, w = maps.shape
    y0, y1, x0, x1 = roi_rect(box, h, w)
    rh, rw = y1 - y0, x1 - x0
    inside = np.zeros((rh, rw), dtype=maps.dtype)
    outside = np.zeros((rh, rw), dtype=maps.dtype)
    for y in range(rh):
        for x in range(rw):
            i = (k * y) // rh
            j = (k * x) // rw
            inside[y, x] = maps[i * k + j, y0 + y, x0 + x]
            outside[y, x] = maps[k * k + i * k + j, y0 + y, x0 + x]
    return inside, outside, (y0, y1, x0, x1)


def instance_score(inside, outside):
    total = 0.0
    count = 0
    for a, b in zip(inside.ravel().tolist(), outside.ravel().tolist()):
        total += max(a, b)
        count += 1
    z = total / count
    return 1.0 / (1.0 + math.exp(-z))


def mask_iou(a, b):
    inter = union = 0
    for u, v in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += u and v
        union += u or v
    return inter / union if union else 0.0


def average_precision_exhaustive(preds, gts, label, thresh):
    """Greedy matching by scanning every gt for each prediction, then AP from explicit PR points.

    ``preds``: per image list of (label, score, mask); ``gts``: per image list of (label, mask).
    """
    entries = []
    for i, ps in enumerate(preds):
        for j, (l, s, m) in enumerate(ps):
            if l == label:
                entries.append((s, i, j))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    used = set()
    tps = []
    for s, i, j in entries:
        best, best_v = None, -1.0
        for gj, (gl, gm) in enumerate(gts[i]):
            if gl != label or (i, gj) in used:
                continue
            v = mask_iou(preds[i][j][2], gm)
            if v > best_v:
                best, best_v = gj, v
        if best is not None and best_v >= thresh:
            used.add((i, best))
            tps.append(1)
        else:
            tps.append(0)
    n_gt = sum(1 for gs in gts for gl, _ in gs if gl == label)
    points = []
    tp = 0
    for r, t in enumerate(tps, start=1):
        tp += t
        points.append((tp / n_gt, tp / r))
    ap = 0.0
    prev_recall = 0.0
    for idx, (rec, _) in enumerate(points):
        if rec > prev_recall:
            best_p = max(p for _, p in points[idx:])
            ap += (rec - prev_recall) * best_p
            prev_recall = rec
    return ap


def map_r(preds, gts, thresh):
    labels = sorted({gl for gs in gts for gl, _ in gs})
    if not labels:
        return 0.0
    return sum(average_precision_exhaustive(preds, gts, l, thresh) for l in labels) / len(labels)
