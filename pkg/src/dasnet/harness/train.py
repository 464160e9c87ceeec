"""Stage-wise training: detector on boxes, then segmentation heads on masks with the detector frozen."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import SynthSample, augment, random_class_subsets
from ..decoder import DecoderConfig, init_decoder, init_seg_head, semantic_loss, seg_logits
from ..attention import attend_batch
from ..decoder import merge_topdown
from ..detector import PREFIX as DET_PREFIX
from ..detector import DetectorConfig, FeaturePyramid, backbone_forward, detection_loss, head_forward, init_detector
from ..instance import PSConfig, init_ps_head, instance_loss, ps_head, sample_instance_boxes
from ..tensor import ParamStore, Tensor, backward, sgd_momentum_step
from .checkpoint import Checkpoint

log = logging.getLogger(__name__)

STAGES = ("detector", "semantic", "instance")
DEFAULT_LR = {"detector": 0.01, "semantic": 0.01, "instance": 0.02}


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    lr: float | None = None
    batch_size: int = 8
    momentum: float = 0.9
    drops: tuple[float, ...] = (0.6, 0.9)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.stage])
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        d = tuple(self.drops)
        if any(b <= a for a, b in zip(d, d[1:])) or any(not 0 < x < 1 for x in d):
            raise ValueError(f"lr drop points must be strictly increasing fractions in (0, 1), got {d}")
        object.__setattr__(self, "drops", d)

    def drop_steps(self) -> list[int]:
        return [int(math.floor(f * self.steps)) for f in self.drops]

    def lr_at(self, step: int) -> float:
        """Base lr divided by 10 once per drop point already passed."""
        return self.lr * 0.1 ** sum(step >= s for s in self.drop_steps())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    accessed: list[int] = field(default_factory=list)  # sample indices read, in order


# --------------------------------------------------------------------------
# config (de)serialization for checkpoint metadata

def config_to_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def config_from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _meta(stage: str, step: int, rng: np.random.Generator, tcfg: TrainConfig, **cfgs) -> dict:
    meta = {"stage": stage, "step": step, "rng_state": rng.bit_generator.state, "train": config_to_dict(tcfg)}
    for key, c in cfgs.items():
        if c is not None:
            meta[key] = config_to_dict(c)
    return meta


@dataclass
class Model:
    """A parameter store plus the configs needed to run it."""
    store: ParamStore
    stage: str
    det: DetectorConfig
    dec: DecoderConfig | None = None
    ps: PSConfig | None = None


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    meta = ckpt.meta
    stage = meta.get("stage")
    if stage not in STAGES:
        raise ValueError(f"checkpoint has unknown stage {stage!r}")
    det = config_from_dict(DetectorConfig, meta["detector"])
    dec = config_from_dict(DecoderConfig, meta["decoder"]) if "decoder" in meta else None
    ps = config_from_dict(PSConfig, meta["ps"]) if "ps" in meta else None
    store = ParamStore()
    rng = np.random.default_rng(0)
    init_detector(store, det, rng)
    if stage == "semantic":
        init_decoder(store, dec, rng)
        init_seg_head(store, dec, rng)
    elif stage == "instance":
        init_decoder(store, dec, rng)
        init_ps_head(store, dec, ps, rng)
    store.load_state(ckpt.tensors, strict=True)
    return Model(store, stage, det, dec, ps)


def _check_data(samples: Sequence[SynthSample]) -> None:
    if not samples:
        raise ValueError("training dataset is empty")


def _run(store: ParamStore, tcfg: TrainConfig, rng: np.random.Generator, step_fn) -> list[float]:
    losses = []
    for step in range(tcfg.steps):
        loss = step_fn(step)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {step}")
        backward(loss)
        sgd_momentum_step(store, tcfg.lr_at(step), tcfg.momentum)
        losses.append(value)
        if step % 100 == 0:
            log.info("%s step %d loss %.4f", tcfg.stage, step, value)
    return losses


# --------------------------------------------------------------------------
# stages

def train_detector(tcfg: TrainConfig, samples: Sequence[SynthSample],
                   det: DetectorConfig = DetectorConfig()) -> TrainResult:
    """SGD over the detection loss on every sample (boxes are always available)."""
    _check_data(samples)
    rng = np.random.default_rng(tcfg.seed)
    store = ParamStore()
    init_detector(store, det, rng)
    accessed: list[int] = []

    def step_fn(step):
        idx = rng.integers(0, len(samples), tcfg.batch_size)
        accessed.extend(int(i) for i in idx)
        batch = [augment(samples[i], rng) if tcfg.augment else samples[i] for i in idx]
        pyr = backbone_forward(store, det, Tensor(np.stack([s.image for s in batch])))
        return detection_loss(det, head_forward(store, det, pyr), [s.boxes() for s in batch])

    losses = _run(store, tcfg, rng, step_fn)
    ckpt = Checkpoint(dict(store.state()), _meta("detector", tcfg.steps, rng, tcfg, detector=det))
    return TrainResult(ckpt, losses, accessed)


def _frozen_detector(detector: Checkpoint) -> tuple[ParamStore, DetectorConfig]:
    if detector.meta.get("stage") != "detector":
        raise ValueError(f"expected a detector checkpoint, got stage {detector.meta.get('stage')!r}")
    det = config_from_dict(DetectorConfig, detector.meta["detector"])
    store = ParamStore()
    init_detector(store, det, np.random.default_rng(0))
    store.load_state(detector.tensors, strict=True)
    store.freeze(DET_PREFIX)
    return store, det


def _masked_indices(samples: Sequence[SynthSample]) -> list[int]:
    _check_data(samples)
    idx = [i for i, s in enumerate(samples) if s.has_mask]
    if not idx:
        raise ValueError("no mask-annotated samples in the training set")
    return idx


@dataclass
class _Item:
    row: int            # row of the per-sample backbone batch
    sample: SynthSample
    label: int
    chosen: list[int]   # instance indices whose boxes drive attention


def _class_items(store, det, samples, pool, tcfg, rng, accessed) -> tuple[FeaturePyramid, list[_Item]]:
    """Draw a batch of masked samples and expand it to (sample, class, box subset) items."""
    batch = []
    for i in rng.choice(pool, size=tcfg.batch_size, replace=True):
        accessed.append(int(i))
        s = augment(samples[i], rng) if tcfg.augment else samples[i]
        if s.instances:
            batch.append(s)
    items = []
    for row, s in enumerate(batch):
        for label, chosen in random_class_subsets(s, rng).items():
            items.append(_Item(row, s, label, chosen))
    pyr = backbone_forward(store, det, Tensor(np.stack([s.image for s in batch])))
    rows = np.array([it.row for it in items])
    rep = FeaturePyramid([Tensor(m.data[rows]) for m in pyr.maps])
    return rep, items


def train_semantic(tcfg: TrainConfig, samples: Sequence[SynthSample], detector: Checkpoint,
                   dec: DecoderConfig | None = None) -> TrainResult:
    """Train decoder and two-channel head on masked samples, one batch item per present class."""
    pool = _masked_indices(samples)
    store, det = _frozen_detector(detector)
    dec = dec or DecoderConfig.for_detector(det)
    rng = np.random.default_rng(tcfg.seed)
    init_decoder(store, dec, rng)
    init_seg_head(store, dec, rng)
    accessed: list[int] = []

    def step_fn(step):
        rep, items = _class_items(store, det, samples, pool, tcfg, rng, accessed)
        box_sets = [[it.sample.instances[j].box for j in it.chosen] for it in items]
        masks = np.stack([it.sample.label_map() == it.label for it in items])
        logits = seg_logits(store, dec, attend_batch(rep, box_sets))
        return semantic_loss(logits, masks, box_sets)

    losses = _run(store, tcfg, rng, step_fn)
    ckpt = Checkpoint(dict(store.state()), _meta("semantic", tcfg.steps, rng, tcfg, detector=det, decoder=dec))
    return TrainResult(ckpt, losses, accessed)


def train_instance(tcfg: TrainConfig, samples: Sequence[SynthSample], detector: Checkpoint,
                   ps: PSConfig = PSConfig(), dec: DecoderConfig | None = None) -> TrainResult:
    """Train decoder and position-sensitive head on masked samples with sampled ROIs."""
    pool = _masked_indices(samples)
    store, det = _frozen_detector(detector)
    dec = dec or DecoderConfig.for_detector(det)
    rng = np.random.default_rng(tcfg.seed)
    init_decoder(store, dec, rng)
    init_ps_head(store, dec, ps, rng)
    accessed: list[int] = []

    def step_fn(step):
        rep, items = _class_items(store, det, samples, pool, tcfg, rng, accessed)
        box_sets, rois, masks = [], [], []
        for it in items:
            insts = it.sample.instances
            gts = [insts[j].box for j in it.chosen]
            others = [x.box for j, x in enumerate(insts) if x.label == it.label and j not in it.chosen]
            box_sets.append(gts)
            rois.append(sample_instance_boxes(gts, ps, rng, avoid=others))
            masks.append([insts[j].mask for j in it.chosen])
        top = merge_topdown(store, dec, attend_batch(rep, box_sets).maps)
        return instance_loss(ps_head(store, top), rois, masks, ps.k)

    losses = _run(store, tcfg, rng, step_fn)
    meta = _meta("instance", tcfg.steps, rng, tcfg, detector=det, decoder=dec, ps=ps)
    return TrainResult(Checkpoint(dict(store.state()), meta), losses, accessed)
