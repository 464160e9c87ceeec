"""Position-sensitive instance head on top of the decoder's full-resolution features.

A 1×1 conv turns the decoder's top features into 2k² score maps: k² "inside"
maps followed by k² "outside" maps, one per relative-position cell. For a box,
each pixel of its ROI copies the inside/outside values from the channel of the
k×k cell it falls in. The instance score is a sigmoid of the ROI-average of
max(inside, outside); the mask is the per-pixel inside/outside softmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .attention import attend_batch
from .decoder import DecoderConfig, merge_topdown
from .detector import DetectorConfig, FeaturePyramid, backbone_forward, detect
from .geometry import Box
from .layers import conv, init_conv
from .tensor import (ParamStore, ShapeError, Tensor, add_scalars, gather, maximum, reshape,
                     segment_mean, sigmoid_cross_entropy, softmax_cross_entropy, stack)

log = logging.getLogger(__name__)

PS_HEAD = "ps_head"


@dataclass(frozen=True)
class PSConfig:
    k: int = 7
    p: int = 2
    n: int = 4
    match_thresh: float = 0.5
    scale_jitter: tuple[float, float] = (0.7, 1.3)
    shift_jitter: float = 0.2
    max_attempts: int = 50
    # fraction of negative draws made by shifting a gt instead of uniformly
    shifted_negatives: float = 0.0

    def __post_init__(self):
        if self.k < 1 or self.p < 1 or self.n < 1:
            raise ValueError(f"k, p, n must all be >= 1, got k={self.k} p={self.p} n={self.n}")


@dataclass(frozen=True)
class InstanceSample:
    box: Box
    label: int  # 1 positive, 0 negative
    gt_index: int | None = None


@dataclass
class AssembledRoi:
    inside: np.ndarray   # h×w
    outside: np.ndarray  # h×w
    rect: tuple[int, int, int, int]  # y0, y1, x0, x1 (exclusive ends)


@dataclass
class InstancePrediction:
    box: Box
    label: int
    score: float
    mask: np.ndarray  # bool H×W


def init_ps_head(store: ParamStore, dec_cfg: DecoderConfig, cfg: PSConfig, rng: np.random.Generator) -> None:
    init_conv(store, PS_HEAD, dec_cfg.feature_channels, 2 * cfg.k * cfg.k, 1, rng, he=True)


def ps_head(store: ParamStore, top: Tensor) -> Tensor:
    """2k² position-sensitive maps from N×T×H×W decoder features."""
    return conv(store, PS_HEAD, top, act=False)


def roi_rect(box: Box, h: int, w: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (y0, y1, x0, x1) of a box, rounded like feature-cell rasterization."""
    r = geometry.box_to_cells(box, h, w)
    return r.y_lo, r.y_hi + 1, r.x_lo, r.x_hi + 1


def assemble_indices(box: Box, k: int, shape: tuple[int, int, int, int], item: int = 0):
    """Flat indices into an N×2k²×H×W array for the ROI's inside and outside values."""
    n, c, h, w = shape
    if c != 2 * k * k:
        raise ShapeError(f"assemble: {c} score maps, expected 2k² = {2 * k * k}")
    y0, y1, x0, x1 = roi_rect(box, h, w)
    rh, rw = y1 - y0, x1 - x0
    if rh < 1 or rw < 1:
        raise ValueError(f"ROI {box} is smaller than one pixel")
    ci = (k * np.arange(rh)) // rh
    cj = (k * np.arange(rw)) // rw
    cell = ci[:, None] * k + cj[None, :]
    ys = np.arange(y0, y1)[:, None]
    xs = np.arange(x0, x1)[None, :]
    base = item * c * h * w + ys * w + xs
    inside = base + cell * (h * w)
    outside = base + (cell + k * k) * (h * w)
    return inside, outside, (y0, y1, x0, x1)


def assemble_roi(maps: np.ndarray, box: Box, k: int, item: int = 0) -> AssembledRoi:
    """Copy each ROI pixel's inside/outside value from its cell's channels."""
    if maps.ndim == 3:
        maps = maps[None]
    inside, outside, rect = assemble_indices(box, k, maps.shape, item)
    flat = maps.reshape(-1)
    return AssembledRoi(flat[inside], flat[outside], rect)


def instance_logit(roi: AssembledRoi) -> float:
    return float(np.maximum(roi.inside, roi.outside).astype(np.float64).mean())


def instance_score(roi: AssembledRoi) -> float:
    """sigmoid(mean over ROI pixels of max(inside, outside))."""
    z = instance_logit(roi)
    return float(1.0 / (1.0 + np.exp(-z))) if z >= 0 else float(np.exp(z) / (1.0 + np.exp(z)))


def instance_mask(roi: AssembledRoi, image_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Foreground probabilities over the ROI and the binary full-image mask (fg >= 0.5)."""
    fg = 1.0 / (1.0 + np.exp(roi.outside.astype(np.float64) - roi.inside.astype(np.float64)))
    full = np.zeros(image_hw, dtype=bool)
    y0, y1, x0, x1 = roi.rect
    full[y0:y1, x0:x1] = fg >= 0.5
    return fg, full


# --------------------------------------------------------------------------
# Training samples

def _jitter(gt: Box, cfg: PSConfig, rng: np.random.Generator) -> Box | None:
    cx, cy = gt.center
    lo, hi = cfg.scale_jitter
    w = gt.width * rng.uniform(lo, hi)
    h = gt.height * rng.uniform(lo, hi)
    cx += rng.uniform(-cfg.shift_jitter, cfg.shift_jitter) * gt.width
    cy += rng.uniform(-cfg.shift_jitter, cfg.shift_jitter) * gt.height
    x0, x1 = max(0.0, cx - w / 2), min(1.0, cx + w / 2)
    y0, y1 = max(0.0, cy - h / 2), min(1.0, cy + h / 2)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box(x0, y0, x1, y1, label=gt.label)


def _random_box(rng: np.random.Generator, label: int, min_side: float = 0.1) -> Box:
    w, h = rng.uniform(min_side, 0.7, size=2)
    x0 = rng.uniform(0, 1 - w)
    y0 = rng.uniform(0, 1 - h)
    return Box(x0, y0, x0 + w, y0 + h, label=label)


def sample_instance_boxes(gts: Sequence[Box], cfg: PSConfig, rng: np.random.Generator,
                          avoid: Sequence[Box] = ()) -> list[InstanceSample]:
    """Up to ``p`` jittered positives and ``n`` random negatives per gt box.

    Positives overlap their gt with IoU above the match threshold; negatives
    overlap no gt (nor any box in ``avoid``) above it. Each required sample
    gets ``max_attempts`` draws; shortfalls are logged, not raised.
    """
    if not gts:
        raise ValueError("sample_instance_boxes needs at least one gt box")
    blockers = list(gts) + list(avoid)
    out: list[InstanceSample] = []
    short = 0
    for gi, gt in enumerate(gts):
        for _ in range(cfg.p):
            for _ in range(cfg.max_attempts):
                cand = _jitter(gt, cfg, rng)
                if cand is not None and geometry.iou(cand, gt) > cfg.match_thresh:
                    out.append(InstanceSample(cand, 1, gi))
                    break
            else:
                short += 1
        for _ in range(cfg.n):
            for _ in range(cfg.max_attempts):
                if cfg.shifted_negatives and rng.random() < cfg.shifted_negatives:
                    cand = _shifted(gt, rng)
                else:
                    cand = _random_box(rng, gt.label)
                if cand is not None and all(geometry.iou(cand, b) <= cfg.match_thresh for b in blockers):
                    out.append(InstanceSample(cand, 0, None))
                    break
            else:
                short += 1
    if short:
        log.debug("instance sampler fell %d samples short", short)
    return out


def _shifted(gt: Box, rng: np.random.Generator) -> Box | None:
    dx, dy = rng.uniform(-1.0, 1.0, size=2)
    dx *= gt.width
    dy *= gt.height
    x0, x1 = max(0.0, gt.x_min + dx), min(1.0, gt.x_max + dx)
    y0, y1 = max(0.0, gt.y_min + dy), min(1.0, gt.y_max + dy)
    if x1 - x0 < 0.02 or y1 - y0 < 0.02:
        return None
    return Box(x0, y0, x1, y1, label=gt.label)


# --------------------------------------------------------------------------
# Loss

def instance_loss(maps: Tensor, samples: Sequence[Sequence[InstanceSample]],
                  gt_masks: Sequence[Sequence[np.ndarray]], k: int) -> Tensor:
    """Score loss over all samples plus mask loss over positives, equal weights.

    ``samples[i]`` and ``gt_masks[i]`` belong to batch item ``i`` of ``maps``;
    a positive's target is its matched gt mask cropped to the sample's ROI.
    """
    flat_in, flat_out, seg = [], [], []
    pos_in, pos_out, pos_t, pos_w = [], [], [], []
    labels = []
    pos_count = sum(s.label == 1 for item in samples for s in item)
    j = 0
    for item, (item_samples, masks) in enumerate(zip(samples, gt_masks)):
        for s in item_samples:
            ins, outs, (y0, y1, x0, x1) = assemble_indices(s.box, k, maps.shape, item)
            flat_in.append(ins.ravel())
            flat_out.append(outs.ravel())
            seg.append(np.full(ins.size, j))
            labels.append(float(s.label))
            if s.label == 1:
                pos_in.append(ins.ravel())
                pos_out.append(outs.ravel())
                pos_t.append(masks[s.gt_index][y0:y1, x0:x1].ravel())
                pos_w.append(np.full(ins.size, 1.0 / (ins.size * pos_count)))
            j += 1
    if j == 0:
        raise ValueError("instance_loss needs at least one sample")
    inside = gather(maps, np.concatenate(flat_in))
    outside = gather(maps, np.concatenate(flat_out))
    logits = segment_mean(maximum(inside, outside), np.concatenate(seg), j)
    score_loss = sigmoid_cross_entropy(logits, np.array(labels), float(j))
    if not pos_count:
        return score_loss
    pi = gather(maps, np.concatenate(pos_in))
    po = gather(maps, np.concatenate(pos_out))
    pair = reshape(stack([po, pi]), (1, 2, pi.shape[0]))
    target = np.concatenate(pos_t).astype(np.int64)[None]
    weight = np.concatenate(pos_w)[None]
    seg_loss = softmax_cross_entropy(pair, target, weight, 1.0)
    return add_scalars(score_loss, seg_loss)


# --------------------------------------------------------------------------
# Inference

def instance_maps_for_boxes(store: ParamStore, dec_cfg: DecoderConfig, pyramid: FeaturePyramid,
                            boxes: Sequence[Box]) -> np.ndarray:
    """Score maps (len(boxes)×2k²×H×W) with each box attending alone."""
    rep = FeaturePyramid([Tensor(np.repeat(m.data, len(boxes), axis=0)) for m in pyramid.maps])
    top = merge_topdown(store, dec_cfg, attend_batch(rep, [[b] for b in boxes]).maps)
    return ps_head(store, top).data


def instance_infer(store: ParamStore, det_cfg: DetectorConfig, dec_cfg: DecoderConfig, cfg: PSConfig,
                   image: np.ndarray, detections: Sequence[Box] | None = None,
                   chunk: int = 16) -> list[InstancePrediction]:
    """Masks and combined scores for every detected box, best first."""
    pyramid = backbone_forward(store, det_cfg, Tensor(image[None]))
    if detections is None:
        (detections,), _ = detect(store, det_cfg, image[None], pyramid)
    hw = image.shape[1:]
    out = []
    for start in range(0, len(detections), chunk):
        part = detections[start:start + chunk]
        maps = instance_maps_for_boxes(store, dec_cfg, pyramid, part)
        for i, b in enumerate(part):
            roi = assemble_roi(maps, b, cfg.k, item=i)
            _, mask = instance_mask(roi, hw)
            out.append(InstancePrediction(b, b.label, float(b.score) * instance_score(roi), mask))
    order = sorted(range(len(out)), key=lambda i: (-out[i].score, i))
    return [out[i] for i in order]
