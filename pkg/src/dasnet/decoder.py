"""Top-down deconvolution decoder and the per-class semantic segmentation head.

The decoder starts at the coarsest class-specific map, upsamples it with a
stride-2 transposed conv to the next finer map's height, width and channel
count, concatenates the two, and fuses them with a 3×3 conv. After the finest
map two more stride-2 transposed convs reach image resolution; those "top"
features feed either the two-channel semantic head or the instance head.

One decoder serves every class: nothing in the parameter names depends on the
class being segmented.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import ClassSpecificPyramid, attend_batch
from .detector import DetectorConfig, FeaturePyramid, backbone_forward, detect
from .geometry import Box, union_mask
from .layers import conv, deconv, init_conv, init_deconv
from .tensor import ParamStore, ShapeError, Tensor, concat_channels, softmax_cross_entropy

PREFIX = "decoder."
SEG_HEAD = "seg_head"


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: tuple[int, ...] = (32, 48, 64)
    top_channels: tuple[int, int] = (16, 16)

    @classmethod
    def for_detector(cls, det: DetectorConfig, top_channels: tuple[int, int] = (16, 16)) -> "DecoderConfig":
        return cls(tuple(det.channels), tuple(top_channels))

    @property
    def num_scales(self) -> int:
        return len(self.in_channels)

    @property
    def feature_channels(self) -> int:
        return self.top_channels[-1]


def init_decoder(store: ParamStore, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    ch = cfg.in_channels
    for k in range(cfg.num_scales - 1, 0, -1):
        # f_{k+1} path (0-based: ch[k]) -> matches f_k (ch[k-1])
        init_deconv(store, f"{PREFIX}up{k}", ch[k], ch[k - 1], 4, rng, he=True)
        init_conv(store, f"{PREFIX}merge{k}", 2 * ch[k - 1], ch[k - 1], 3, rng, he=True)
    t1, t2 = cfg.top_channels
    init_deconv(store, f"{PREFIX}top2", ch[0], t1, 4, rng, he=True)
    init_deconv(store, f"{PREFIX}top1", t1, t2, 4, rng, he=True)


def init_seg_head(store: ParamStore, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    init_conv(store, SEG_HEAD, cfg.feature_channels, 2, 1, rng, he=True)


def merge_topdown(store: ParamStore, cfg: DecoderConfig, maps: Sequence[Tensor]) -> Tensor:
    """Top features (N×T×H×W at image resolution) from a class-specific pyramid."""
    if len(maps) != cfg.num_scales:
        raise ShapeError(f"decoder expects {cfg.num_scales} scales, got {len(maps)}")
    for k, (m, c) in enumerate(zip(maps, cfg.in_channels)):
        if m.data.ndim != 4 or m.shape[1] != c:
            raise ShapeError(f"decoder scale {k + 1}: expected {c} channels, got shape {m.shape}")
    x = maps[-1]
    for k in range(cfg.num_scales - 1, 0, -1):
        up = deconv(store, f"{PREFIX}up{k}", x)
        if up.shape != maps[k - 1].shape:
            raise ShapeError(f"decoder: upsampled {up.shape} does not match f_{k} {maps[k - 1].shape}")
        x = conv(store, f"{PREFIX}merge{k}", concat_channels(up, maps[k - 1]), pad=1)
    x = deconv(store, f"{PREFIX}top2", x)
    return deconv(store, f"{PREFIX}top1", x)


def seg_logits(store: ParamStore, cfg: DecoderConfig, pyramid: ClassSpecificPyramid | Sequence[Tensor]) -> Tensor:
    """N×2×H×W logits; channel 0 background, channel 1 foreground."""
    maps = pyramid.maps if isinstance(pyramid, ClassSpecificPyramid) else pyramid
    return conv(store, SEG_HEAD, merge_topdown(store, cfg, maps), act=False)


def box_weights(box_sets: Sequence[Sequence[Box]], h: int, w: int) -> np.ndarray:
    """Float N×H×W indicator of pixels inside each item's box union."""
    return np.stack([union_mask(bs, h, w) for bs in box_sets]).astype(np.float64)


def semantic_loss(logits: Tensor, gt_masks: np.ndarray, box_sets: Sequence[Sequence[Box]]) -> Tensor:
    """Mean two-way pixel cross-entropy over pixels inside the box unions.

    Pixels outside every box of their item get zero loss and zero gradient.
    """
    n, _, h, w = logits.shape
    if gt_masks.shape != (n, h, w):
        raise ShapeError(f"semantic_loss: masks {gt_masks.shape} vs logits {logits.shape}")
    weight = box_weights(box_sets, h, w)
    empty = [i for i in range(n) if not weight[i].any()]
    if empty:
        raise ValueError(f"semantic_loss: empty box union for batch items {empty}")
    return softmax_cross_entropy(logits, gt_masks.astype(np.int64), weight, float(weight.sum()))


def foreground_prob(logits: np.ndarray) -> np.ndarray:
    """Softmax foreground channel of N×2×H×W logits."""
    z = logits.astype(np.float64)
    return 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))


def combine_class_probs(probs: dict[int, np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Max rule over per-class foreground maps; background where the max is below 0.5."""
    out = np.zeros(shape, dtype=np.int64)
    if not probs:
        return out
    labels = sorted(probs)
    stack = np.stack([probs[l] for l in labels])
    best = stack.argmax(axis=0)
    keep = stack.max(axis=0) >= 0.5
    out[keep] = np.asarray(labels)[best[keep]]
    return out


def semantic_infer(store: ParamStore, det_cfg: DetectorConfig, dec_cfg: DecoderConfig,
                   image: np.ndarray, detections: Sequence[Box] | None = None) -> np.ndarray:
    """Label map H×W in [0, C] for one 3×H×W image."""
    pyramid = backbone_forward(store, det_cfg, Tensor(image[None]))
    if detections is None:
        (detections,), _ = detect(store, det_cfg, image[None], pyramid)
    classes = sorted({b.label for b in detections})
    h, w = image.shape[1:]
    if not classes:
        return np.zeros((h, w), dtype=np.int64)
    rep = FeaturePyramid([Tensor(np.repeat(m.data, len(classes), axis=0)) for m in pyramid.maps])
    sets = [[b for b in detections if b.label == l] for l in classes]
    logits = seg_logits(store, dec_cfg, attend_batch(rep, sets))
    # pixels outside every box of a class were never supervised for it
    fg = foreground_prob(logits.data) * box_weights(sets, h, w)
    return combine_class_probs({l: fg[i] for i, l in enumerate(classes)}, (h, w))
