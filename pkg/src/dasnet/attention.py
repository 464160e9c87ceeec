"""Box attention: class-specific feature pyramids by zeroing cells outside boxes.

For a class ``l`` and its boxes ``B^l``, every scale ``f_k`` keeps the feature
vector at cell (x, y) when that cell lies in the union of the boxes' cell
ranges and is zero elsewhere. Shapes never change and kept values are copied
bit-exactly, so the whole spatial layout survives for the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import FeaturePyramid
from .geometry import Box, union_mask
from .tensor import ShapeError, Tensor, _node


@dataclass
class ClassSpecificPyramid:
    maps: list[Tensor]
    label: int
    masks: list[np.ndarray]  # per scale, bool N×H_k×W_k of kept cells

    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


def select_class_boxes(boxes: Sequence[Box], label: int) -> list[Box]:
    return [b for b in boxes if b.label == label]


def attend_backward(grad_out: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Route gradients through kept cells only."""
    if len(grad_out) != len(masks):
        raise ShapeError(f"attend_backward: {len(grad_out)} gradient maps vs {len(masks)} masks")
    out = []
    for g, m in zip(grad_out, masks):
        if g.ndim != 4 or m.shape != (g.shape[0],) + g.shape[2:]:
            raise ShapeError(f"attend_backward: gradient {g.shape} does not fit mask {m.shape}")
        out.append(np.where(m[:, None], g, 0).astype(g.dtype, copy=False))
    return out


def _masked(x: Tensor, keep: np.ndarray) -> Tensor:
    out = np.where(keep[:, None], x.data, x.data.dtype.type(0))
    return _node(out, (x,), lambda g: (attend_backward([g], [keep])[0],), "attend")


def attend_batch(pyramid: FeaturePyramid, box_sets: Sequence[Sequence[Box]],
                 label: int = 0) -> ClassSpecificPyramid:
    """Mask batch item ``i`` of every scale with the union of ``box_sets[i]``."""
    n = pyramid.maps[0].shape[0]
    if len(box_sets) != n:
        raise ShapeError(f"attend: {len(box_sets)} box sets for a batch of {n}")
    maps, masks = [], []
    for f in pyramid.maps:
        _, _, h, w = f.shape
        keep = np.stack([union_mask(bs, h, w) for bs in box_sets])
        maps.append(_masked(f, keep))
        masks.append(keep)
    return ClassSpecificPyramid(maps, label, masks)


def attend(pyramid: FeaturePyramid, boxes: Sequence[Box], label: int = 0) -> ClassSpecificPyramid:
    """Apply one box set to every item of the pyramid's batch."""
    n = pyramid.maps[0].shape[0]
    return attend_batch(pyramid, [boxes] * n, label)
