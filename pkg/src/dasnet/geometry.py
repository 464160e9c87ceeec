"""Normalized box arithmetic: IoU, NMS, matching, offset coding, rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates.

    ``label`` 0 is background; ``score`` is None for ground truth.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: int = 0
    score: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.x_min < self.x_max <= 1.0 and 0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(f"invalid box coordinates {self.coords()}")
        if self.label < 0:
            raise ValueError(f"invalid box label {self.label}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def with_score(self, score: float | None) -> "Box":
        return Box(*self.coords(), label=self.label, score=score)


@dataclass(frozen=True)
class CellRange:
    """Inclusive cell index ranges on an H×W grid."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.coords() for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; edge-touching boxes have IoU 0."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between N×4 and M×4 coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_indices(coords: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS over arrays; returns kept input indices in keep order.

    Ties in score keep the lower input index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    overlaps = iou_matrix(coords, coords)
    keep: list[int] = []
    for i in order:
        if all(overlaps[i, j] <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def nms(boxes: Sequence[Box], iou_thresh: float = 0.45) -> list[Box]:
    """Greedy non-maximum suppression of scored boxes (apply per class)."""
    if not boxes:
        return []
    if any(b.score is None for b in boxes):
        raise ValueError("nms requires scored boxes")
    keep = nms_indices(boxes_to_array(boxes), np.array([b.score for b in boxes]), iou_thresh)
    return [boxes[i] for i in keep]


def match_arrays(candidates: np.ndarray, gts: np.ndarray, thresh: float,
                 force_best: bool = False) -> np.ndarray:
    """Assignment of each candidate row to a gt row index, -1 when unmatched.

    A candidate takes its argmax-IoU gt (lowest index on ties) iff that IoU
    exceeds ``thresh``. With ``force_best`` every gt then claims its single best
    overlapping candidate; later gts win contested candidates.
    """
    n = len(candidates)
    assign = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gts) == 0:
        return assign
    ov = iou_matrix(candidates, gts)
    best_gt = ov.argmax(axis=1)
    best_iou = ov[np.arange(n), best_gt]
    assign[best_iou > thresh] = best_gt[best_iou > thresh]
    if force_best:
        for j in range(ov.shape[1]):
            i = int(ov[:, j].argmax())
            if ov[i, j] > 0:
                assign[i] = j
    return assign


def match_boxes(candidates: Sequence[Box], gts: Sequence[Box], thresh: float = 0.5,
                force_best: bool = False) -> list[int | None]:
    if not 0 < thresh < 1:
        raise ValueError(f"match threshold must lie in (0, 1), got {thresh}")
    assign = match_arrays(boxes_to_array(candidates), boxes_to_array(gts), thresh, force_best)
    return [None if a < 0 else int(a) for a in assign]


def _center_size(c: np.ndarray) -> tuple[np.ndarray, ...]:
    return ((c[..., 0] + c[..., 2]) / 2, (c[..., 1] + c[..., 3]) / 2,
            c[..., 2] - c[..., 0], c[..., 3] - c[..., 1])


def encode_array(defaults: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Center/size offsets (dcx/w, dcy/h, ln(gw/w), ln(gh/h)), shape N×4."""
    dcx, dcy, dw, dh = _center_size(np.asarray(defaults, dtype=np.float64))
    gcx, gcy, gw, gh = _center_size(np.asarray(gts, dtype=np.float64))
    return np.stack([(gcx - dcx) / dw, (gcy - dcy) / dh, np.log(gw / dw), np.log(gh / dh)], axis=-1)


def decode_array(defaults: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_array`, clamped to [0, 1]."""
    dcx, dcy, dw, dh = _center_size(np.asarray(defaults, dtype=np.float64))
    off = np.asarray(offsets, dtype=np.float64)
    cx = dcx + off[..., 0] * dw
    cy = dcy + off[..., 1] * dh
    # exp of very large log-ratios overflows; anything past e^10 is clamped anyway
    w = dw * np.exp(np.minimum(off[..., 2], 10.0))
    h = dh * np.exp(np.minimum(off[..., 3], 10.0))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(out, 0.0, 1.0)


def encode_offsets(default: Box, gt: Box) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_array(np.array(default.coords()), np.array(gt.coords())))


def decode_offsets(default: Box, offsets: Sequence[float], label: int = 0,
                   score: float | None = None) -> Box:
    x0, y0, x1, y1 = (float(v) for v in decode_array(np.array(default.coords()), np.array(offsets)))
    # a box squeezed flat against an image edge keeps a sliver of extent
    tiny = 1e-6
    if x1 - x0 < tiny:
        x0, x1 = (x1 - tiny, x1) if x1 >= tiny else (0.0, tiny)
    if y1 - y0 < tiny:
        y0, y1 = (y1 - tiny, y1) if y1 >= tiny else (0.0, tiny)
    return Box(x0, y0, x1, y1, label=label, score=score)


def cell_bounds(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Inclusive cells covering the interval [lo, hi] on an n-cell axis."""
    a = max(0, min(n - 1, math.floor(n * lo)))
    b = max(0, min(n - 1, math.ceil(n * hi) - 1))
    if a > b:
        a = b = max(0, min(n - 1, math.floor(n * (lo + hi) / 2)))
    return a, b


def box_to_cells(box: Box, h: int, w: int) -> CellRange:
    """Grid cells whose extent meets the box interior (floor/ceil over-coverage)."""
    x_lo, x_hi = cell_bounds(box.x_min, box.x_max, w)
    y_lo, y_hi = cell_bounds(box.y_min, box.y_max, h)
    return CellRange(x_lo, x_hi, y_lo, y_hi)


def union_mask(boxes: Sequence[Box], h: int, w: int) -> np.ndarray:
    """Boolean H×W grid of cells covered by any box's :func:`box_to_cells` range."""
    out = np.zeros((h, w), dtype=bool)
    for b in boxes:
        r = box_to_cells(b, h, w)
        out[r.y_lo:r.y_hi + 1, r.x_lo:r.x_hi + 1] = True
    return out
