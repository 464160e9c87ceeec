"""Run trained models over a dataset and score them."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..data import SynthSample
from ..detector import backbone_forward, detect
from ..geometry import Box
from ..instance import assemble_roi, instance_infer, instance_maps_for_boxes, instance_score
from ..decoder import semantic_infer
from ..tensor import Tensor
from .metrics import DEFAULT_THRESHOLDS, GtMask, MiouResult, ScoredMask, detection_recall, eval_map_r, eval_miou
from .train import Model


def detect_all(model: Model, samples: Sequence[SynthSample], chunk: int = 32) -> list[list[Box]]:
    out: list[list[Box]] = []
    for start in range(0, len(samples), chunk):
        imgs = np.stack([s.image for s in samples[start:start + chunk]])
        dets, _ = detect(model.store, model.det, imgs)
        out.extend(dets)
    return out


def evaluate_detector(model: Model, samples: Sequence[SynthSample], thresh: float = 0.5) -> float:
    return detection_recall(detect_all(model, samples), [s.boxes() for s in samples], thresh)


def predict_semantic(model: Model, samples: Sequence[SynthSample]) -> list[np.ndarray]:
    if model.stage != "semantic":
        raise ValueError(f"semantic prediction needs a semantic checkpoint, got {model.stage!r}")
    dets = detect_all(model, samples)
    return [semantic_infer(model.store, model.det, model.dec, s.image, d) for s, d in zip(samples, dets)]


def evaluate_semantic(model: Model, samples: Sequence[SynthSample]) -> MiouResult:
    preds = predict_semantic(model, samples)
    return eval_miou(preds, [s.label_map() for s in samples], model.det.num_classes)


def predict_instances(model: Model, samples: Sequence[SynthSample]) -> list[list[ScoredMask]]:
    if model.stage != "instance":
        raise ValueError(f"instance prediction needs an instance checkpoint, got {model.stage!r}")
    dets = detect_all(model, samples)
    out = []
    for s, d in zip(samples, dets):
        preds = instance_infer(model.store, model.det, model.dec, model.ps, s.image, d)
        out.append([ScoredMask(p.label, p.score, p.mask) for p in preds])
    return out


def evaluate_instance(model: Model, samples: Sequence[SynthSample],
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict[float, float]:
    preds = predict_instances(model, samples)
    gts = [[GtMask(i.label, i.mask) for i in s.instances] for s in samples]
    return eval_map_r(preds, gts, thresholds, model.det.num_classes)


def shift_half_width(box: Box) -> Box | None:
    """The box moved by half its width, rightward when it fits, else leftward."""
    dx = box.width / 2
    if box.x_max + dx <= 1.0:
        return Box(box.x_min + dx, box.y_min, box.x_max + dx, box.y_max, box.label)
    if box.x_min - dx >= 0.0:
        return Box(box.x_min - dx, box.y_min, box.x_max - dx, box.y_max, box.label)
    return None


def position_sensitivity(model: Model, samples: Sequence[SynthSample]) -> tuple[int, int]:
    """(lowered, total): gt boxes whose score drops when the ROI shifts by half a width.

    Score maps come from the gt box's own attention; only the ROI moves.
    """
    if model.stage != "instance":
        raise ValueError(f"position sensitivity needs an instance checkpoint, got {model.stage!r}")
    lowered = total = 0
    for s in samples:
        boxes = [i.box for i in s.instances]
        pairs = [(b, shift_half_width(b)) for b in boxes]
        pairs = [(b, t) for b, t in pairs if t is not None]
        if not pairs:
            continue
        pyr = backbone_forward(model.store, model.det, Tensor(s.image[None]))
        maps = instance_maps_for_boxes(model.store, model.dec, pyr, [b for b, _ in pairs])
        for i, (b, t) in enumerate(pairs):
            total += 1
            lowered += instance_score(assemble_roi(maps, t, model.ps.k, i)) < \
                instance_score(assemble_roi(maps, b, model.ps.k, i))
    return lowered, total
