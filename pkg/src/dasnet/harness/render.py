"""Prediction overlays written as binary PPM."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..data import write_ppm
from ..geometry import Box, box_to_cells

ALPHA = 0.5
# fixed per-class overlay colors (class 1 first), cycled beyond the list
CLASS_COLORS = np.array([
    [255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255], [0, 255, 255],
], dtype=np.float64) / 255.0
# fixed per-instance colors, cycled
INSTANCE_COLORS = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190],
], dtype=np.float64) / 255.0


def class_color(label: int) -> np.ndarray:
    return CLASS_COLORS[(label - 1) % len(CLASS_COLORS)]


def _blend(img: np.ndarray, where: np.ndarray, color: np.ndarray) -> None:
    img[:, where] = (1 - ALPHA) * img[:, where] + ALPHA * color[:, None]


def overlay_semantic(image: np.ndarray, label_map: np.ndarray) -> np.ndarray:
    """3×H×W float image with each labeled pixel blended toward its class color."""
    if label_map.shape != image.shape[1:]:
        raise ValueError(f"label map {label_map.shape} does not match image {image.shape}")
    out = image.astype(np.float64).copy()
    for label in np.unique(label_map):
        if label > 0:
            _blend(out, label_map == label, class_color(int(label)))
    return out


def _outline(img: np.ndarray, box: Box, color: np.ndarray) -> None:
    _, h, w = img.shape
    r = box_to_cells(box, h, w)
    img[:, r.y_lo, r.x_lo:r.x_hi + 1] = color[:, None]
    img[:, r.y_hi, r.x_lo:r.x_hi + 1] = color[:, None]
    img[:, r.y_lo:r.y_hi + 1, r.x_lo] = color[:, None]
    img[:, r.y_lo:r.y_hi + 1, r.x_hi] = color[:, None]


def overlay_instances(image: np.ndarray, masks: Sequence[np.ndarray], boxes: Sequence[Box]) -> np.ndarray:
    """Blend each instance mask in its own color and outline its box."""
    if len(masks) != len(boxes):
        raise ValueError(f"{len(masks)} masks vs {len(boxes)} boxes")
    out = image.astype(np.float64).copy()
    for i, (m, b) in enumerate(zip(masks, boxes)):
        if m.shape != image.shape[1:]:
            raise ValueError(f"mask {m.shape} does not match image {image.shape}")
        color = INSTANCE_COLORS[i % len(INSTANCE_COLORS)]
        _blend(out, m, color)
        _outline(out, b, color)
    return out


def render_overlay(image: np.ndarray, path, label_map: np.ndarray | None = None,
                   instances: Sequence[tuple[np.ndarray, Box]] | None = None) -> np.ndarray:
    """Write a semantic (``label_map``) or instance (``instances``) overlay; returns the image."""
    if (label_map is None) == (instances is None):
        raise ValueError("give exactly one of label_map or instances")
    if label_map is not None:
        out = overlay_semantic(image, label_map)
    else:
        out = overlay_instances(image, [m for m, _ in instances], [b for _, b in instances])
    write_ppm(path, out.astype(np.float32))
    return out
