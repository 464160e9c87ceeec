"""Desk-scale single-shot detector: conv backbone, per-scale box predictors.

The detector's two products feed the rest of the pipeline: the multi-scale
feature maps and the final scored boxes after per-class NMS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from .geometry import Box
from .layers import conv, init_conv
from .tensor import (ParamStore, ShapeError, Tensor, add_scalars, channel_slice, reshape, smooth_l1,
                     softmax_cross_entropy)

PREFIX = "detector."


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    image_size: int = 64
    channels: tuple[int, ...] = (32, 48, 64)
    convs_per_scale: int = 2
    box_scales: tuple[float, ...] = (0.3, 0.55, 0.8)
    match_thresh: float = 0.5
    neg_ratio: int = 3
    smooth_l1_beta: float = 1.0
    loc_weight: float = 25.0
    score_thresh: float = 0.5
    nms_thresh: float = 0.45
    max_detections: int = 32

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")
        if len(self.channels) < 2 or len(self.channels) != len(self.box_scales):
            raise ValueError("channels and box_scales need one entry per scale (at least 2)")
        if self.image_size % (2 ** (self.num_scales + 1)):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{self.num_scales + 1}")

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    def grid_sizes(self) -> list[int]:
        """Feature map sides at strides 4, 8, 16, ..."""
        return [self.image_size // 2 ** (k + 2) for k in range(self.num_scales)]


@dataclass
class FeaturePyramid:
    """Maps f_1..f_m, each N×C_k×H_k×W_k, finest first."""

    maps: list[Tensor]

    def __len__(self) -> int:
        return len(self.maps)

    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


@dataclass
class RawPredictions:
    scores: list[Tensor]   # per scale N×(C+1)×H×W logits
    offsets: list[Tensor]  # per scale N×4×H×W


def backbone_layout(cfg: DetectorConfig) -> list[tuple[str, int, int, int, bool]]:
    """(name, cin, cout, stride, emits_scale) per backbone conv.

    Two stride-2 convs take the image to stride 4; each scale then has
    ``convs_per_scale`` stride-1 convs, and every later scale starts with a
    stride-2 conv. The last conv of each scale emits f_k.
    """
    c = cfg.channels
    layers: list[tuple[str, int, int, int, bool]] = []

    def add(cin, cout, stride):
        layers.append((f"conv{len(layers) + 1}", cin, cout, stride, False))

    add(3, c[0] // 2, 2)
    add(c[0] // 2, c[0], 2)
    for k in range(cfg.num_scales):
        if k:
            add(c[k - 1], c[k], 2)
        for _ in range(cfg.convs_per_scale):
            add(c[k], c[k], 1)
        name, cin, cout, stride, _ = layers[-1]
        layers[-1] = (name, cin, cout, stride, True)
    return layers


def init_detector(store: ParamStore, cfg: DetectorConfig, rng: np.random.Generator) -> None:
    for name, cin, cout, _, _ in backbone_layout(cfg):
        init_conv(store, f"{PREFIX}backbone.{name}", cin, cout, 3, rng)
    for k, ch in enumerate(cfg.channels):
        init_conv(store, f"{PREFIX}head{k + 1}", ch, cfg.num_classes + 1 + 4, 3, rng)


def backbone_forward(store: ParamStore, cfg: DetectorConfig, images: Tensor) -> FeaturePyramid:
    """Pyramid for an N×3×H×W batch (a single 3×H×W image gets N=1)."""
    if images.data.ndim == 3:
        images = reshape(images, (1,) + images.shape)
    n, c, h, w = images.shape
    div = 2 ** (cfg.num_scales + 1)
    if c != 3 or h % div or w % div:
        raise ShapeError(f"backbone needs N×3×H×W with H, W divisible by {div}, got {images.shape}")
    x = images
    maps = []
    for name, _, _, stride, emits in backbone_layout(cfg):
        x = conv(store, f"{PREFIX}backbone.{name}", x, stride=stride, pad=1)
        if emits:
            maps.append(x)
    return FeaturePyramid(maps)


def head_forward(store: ParamStore, cfg: DetectorConfig, pyramid: FeaturePyramid) -> RawPredictions:
    c1 = cfg.num_classes + 1
    scores, offsets = [], []
    for k, f in enumerate(pyramid.maps):
        out = conv(store, f"{PREFIX}head{k + 1}", f, pad=1, act=False)
        scores.append(channel_slice(out, 0, c1))
        offsets.append(channel_slice(out, c1, c1 + 4))
    return RawPredictions(scores, offsets)


def build_default_boxes(cfg: DetectorConfig) -> list[list[Box]]:
    """One square box per cell, centered on it, side = level scale, clamped to the image."""
    out = []
    for side, scale in zip(cfg.grid_sizes(), cfg.box_scales):
        coords = _level_defaults(side, scale)
        out.append([Box(*row) for row in coords])
    return out


def _level_defaults(side: int, scale: float) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side
    cy, cx = np.meshgrid(c, c, indexing="ij")
    half = scale / 2
    coords = np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4)
    return np.clip(coords, 0.0, 1.0)


def default_box_array(cfg: DetectorConfig) -> np.ndarray:
    """All default boxes, D×4, ordered by scale then row-major cell."""
    return np.concatenate([_level_defaults(s, sc) for s, sc in zip(cfg.grid_sizes(), cfg.box_scales)])


def _flatten_levels(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-level N×K×H×W arrays -> N×D×K."""
    return np.concatenate([m.reshape(m.shape[0], m.shape[1], -1).transpose(0, 2, 1) for m in maps], axis=1)


def _split_levels(flat: np.ndarray, cfg: DetectorConfig) -> list[np.ndarray]:
    """N×D×K -> per-level N×K×H×W (inverse of :func:`_flatten_levels`)."""
    out, start = [], 0
    for side in cfg.grid_sizes():
        d = side * side
        chunk = flat[:, start:start + d]
        out.append(np.ascontiguousarray(chunk.transpose(0, 2, 1).reshape(flat.shape[0], -1, side, side)))
        start += d
    return out


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def detection_targets(cfg: DetectorConfig, score_logits: np.ndarray, gts: Sequence[Sequence[Box]]):
    """Class targets, classification weights, offset targets and positive count.

    ``score_logits`` is N×D×(C+1). Negatives are mined per image by background
    loss, ``neg_ratio`` per positive (per image with no positive: ``neg_ratio``).
    """
    defaults = default_box_array(cfg)
    n, d, _ = score_logits.shape
    cls_t = np.zeros((n, d), dtype=np.int64)
    cls_w = np.zeros((n, d), dtype=np.float64)
    loc_t = np.zeros((n, d, 4), dtype=np.float64)
    bg_loss = -_log_softmax(score_logits, axis=2)[:, :, 0]
    total_pos = 0
    for i, boxes in enumerate(gts):
        assign = np.full(d, -1)
        if boxes:
            gt_arr = geometry.boxes_to_array(boxes)
            assign = geometry.match_arrays(defaults, gt_arr, cfg.match_thresh, force_best=True)
            pos = assign >= 0
            cls_t[i, pos] = [boxes[j].label for j in assign[pos]]
            loc_t[i, pos] = geometry.encode_array(defaults[pos], gt_arr[assign[pos]])
        pos = assign >= 0
        npos = int(pos.sum())
        total_pos += npos
        neg = np.flatnonzero(~pos)
        k = min(len(neg), cfg.neg_ratio * max(npos, 1))
        # stable ordering: hardest first, lower index on ties
        hard = neg[np.lexsort((neg, -bg_loss[i, neg]))[:k]]
        cls_w[i, pos] = 1.0
        cls_w[i, hard] = 1.0
    return cls_t, cls_w, loc_t, total_pos


def detection_loss(cfg: DetectorConfig, preds: RawPredictions, gts: Sequence[Sequence[Box]]) -> Tensor:
    """Softmax confidence loss (positives + mined negatives) plus smooth-L1 on positives.

    Normalized by the batch's positive count (1 when there are none).
    """
    logits = _flatten_levels([s.data for s in preds.scores])
    cls_t, cls_w, loc_t, total_pos = detection_targets(cfg, logits, gts)
    norm = float(max(total_pos, 1))
    terms = []
    t_levels = _split_levels(cls_t[:, :, None], cfg)
    w_levels = _split_levels(cls_w[:, :, None], cfg)
    loc_levels = _split_levels(loc_t, cfg)
    posw_levels = _split_levels(np.repeat((cls_t > 0)[:, :, None], 4, axis=2).astype(np.float64), cfg)
    for k in range(len(preds.scores)):
        terms.append(softmax_cross_entropy(preds.scores[k], t_levels[k][:, 0], w_levels[k][:, 0], norm))
        terms.append(smooth_l1(preds.offsets[k], loc_levels[k], cfg.loc_weight * posw_levels[k], norm,
                               cfg.smooth_l1_beta))
    return add_scalars(*terms)


def postprocess(cfg: DetectorConfig, score_logits: np.ndarray, offsets: np.ndarray,
                class_order: Sequence[int] | None = None) -> list[Box]:
    """Detections for one image from D×(C+1) logits and D×4 offsets."""
    defaults = default_box_array(cfg)
    probs = np.exp(_log_softmax(score_logits, axis=1))
    decoded = geometry.decode_array(defaults, offsets)
    valid = (decoded[:, 2] - decoded[:, 0] > 1e-6) & (decoded[:, 3] - decoded[:, 1] > 1e-6)
    found: list[tuple[float, int, int, Box]] = []
    classes = range(1, cfg.num_classes + 1) if class_order is None else class_order
    for c in classes:
        idx = np.flatnonzero((probs[:, c] > cfg.score_thresh) & valid)
        if len(idx) == 0:
            continue
        keep = geometry.nms_indices(decoded[idx], probs[idx, c], cfg.nms_thresh)
        for j in keep:
            i = int(idx[j])
            box = Box(*(float(v) for v in decoded[i]), label=c, score=float(probs[i, c]))
            found.append((-box.score, c, i, box))
    found.sort(key=lambda t: t[:3])
    return [t[3] for t in found[:cfg.max_detections]]


def detect(store: ParamStore, cfg: DetectorConfig, images: np.ndarray,
           pyramid: FeaturePyramid | None = None) -> tuple[list[list[Box]], FeaturePyramid]:
    """Detections per image of an N×3×H×W batch, plus the pyramid that produced them."""
    if pyramid is None:
        pyramid = backbone_forward(store, cfg, Tensor(np.asarray(images, dtype=np.float32)))
    preds = head_forward(store, cfg, pyramid)
    logits = _flatten_levels([s.data for s in preds.scores])
    offs = _flatten_levels([o.data for o in preds.offsets])
    return [postprocess(cfg, logits[i], offs[i]) for i in range(logits.shape[0])], pyramid
