"""Desk-scale experiments: shapes corpus, stage-wise training, held-out scores.

The settings here are the ones the acceptance suite runs. Learning rates are
higher than the CLI defaults because the runs are short.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from ..data import SplitConfig, apply_split, generate_dataset, make_split
from ..detector import DetectorConfig
from ..instance import PSConfig
from .checkpoint import Checkpoint
from .evaluate import evaluate_detector, evaluate_instance, evaluate_semantic, position_sensitivity
from .metrics import MiouResult
from .train import TrainConfig, model_from_checkpoint, train_detector, train_instance, train_semantic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 2000
    n_test: int = 200
    train_seed: int = 1
    test_seed: int = 2
    split_seed: int = 0
    mask_fractions: tuple[float, float] = (0.125, 0.0125)
    detector_steps: int = 3000
    detector_lr: float = 0.01
    semantic_steps: int = 1200
    semantic_lr: float = 0.1
    instance_steps: int = 1000
    instance_lr: float = 0.1
    instance_mask_fraction: float = 0.125
    seed: int = 0


@dataclass
class Timings:
    seconds: dict[str, float] = field(default_factory=dict)

    def total(self) -> float:
        return sum(self.seconds.values())


class Corpus:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.train = generate_dataset(cfg.train_seed, cfg.n_train)
        self.test = generate_dataset(cfg.test_seed, cfg.n_test)

    def split(self, fraction: float):
        flags = make_split(SplitConfig(len(self.train), fraction, self.cfg.split_seed),
                           [s.classes() for s in self.train], 3)
        return apply_split(self.train, flags)


def run_detector(cfg: ExperimentConfig, corpus: Corpus, timings: Timings) -> tuple[Checkpoint, float]:
    t = time.process_time()
    res = train_detector(TrainConfig("detector", cfg.detector_steps, cfg.detector_lr, seed=cfg.seed),
                         corpus.train, DetectorConfig())
    timings.seconds["train_detector"] = time.process_time() - t
    t = time.process_time()
    recall = evaluate_detector(model_from_checkpoint(res.checkpoint), corpus.test)
    timings.seconds["eval_detector"] = time.process_time() - t
    log.info("detector recall %.4f", recall)
    return res.checkpoint, recall


def run_semantic(cfg: ExperimentConfig, corpus: Corpus, detector: Checkpoint, fraction: float,
                 timings: Timings) -> tuple[Checkpoint, MiouResult]:
    t = time.process_time()
    res = train_semantic(TrainConfig("semantic", cfg.semantic_steps, cfg.semantic_lr, seed=cfg.seed),
                         corpus.split(fraction), detector)
    timings.seconds[f"train_semantic_{fraction}"] = time.process_time() - t
    t = time.process_time()
    miou = evaluate_semantic(model_from_checkpoint(res.checkpoint), corpus.test)
    timings.seconds[f"eval_semantic_{fraction}"] = time.process_time() - t
    log.info("semantic mask_fraction=%s miou %.4f", fraction, miou.mean)
    return res.checkpoint, miou


@dataclass
class InstanceOutcome:
    checkpoint: Checkpoint
    map_r: dict[float, float]
    lowered: int
    positives: int
    losses: list[float]


def run_instance(cfg: ExperimentConfig, corpus: Corpus, detector: Checkpoint, timings: Timings,
                 ps: PSConfig = PSConfig()) -> InstanceOutcome:
    t = time.process_time()
    res = train_instance(TrainConfig("instance", cfg.instance_steps, cfg.instance_lr, seed=cfg.seed),
                         corpus.split(cfg.instance_mask_fraction), detector, ps)
    timings.seconds["train_instance"] = time.process_time() - t
    t = time.process_time()
    model = model_from_checkpoint(res.checkpoint)
    map_r = evaluate_instance(model, corpus.test)
    lowered, total = position_sensitivity(model, corpus.test)
    timings.seconds["eval_instance"] = time.process_time() - t
    log.info("instance map %s, position sensitivity %d/%d", map_r, lowered, total)
    return InstanceOutcome(res.checkpoint, map_r, lowered, total, res.losses)
