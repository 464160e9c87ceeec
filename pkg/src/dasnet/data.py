"""Synthetic shapes corpus: generation, augmentation, semi-supervised splits, disk I/O.

Each sample is an RGB image with up to a few filled shapes (disk, square,
triangle) on a noisy background. Masks are binary and disjoint: a shape drawn
later overwrites the pixels of earlier ones, whose boxes are then recomputed
tight around what stays visible.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CLASS_NAMES = ("background", "disk", "square", "triangle")

# base RGB per class; instances jitter around these
PALETTE = (
    (0.90, 0.25, 0.20),
    (0.20, 0.85, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
)


class DataFormatError(ValueError):
    """Malformed dataset file; carries the path and byte offset."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 3
    size: int = 64
    min_instances: int = 1
    max_instances: int = 4
    min_extent: float = 0.28
    max_extent: float = 0.7
    noise: float = 0.04
    color_jitter: float = 0.08
    min_visible: float = 0.5

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(PALETTE)}], got {self.num_classes}")
        if self.num_classes > 3:
            log.info("classes beyond 3 reuse shape types with distinct colors")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("instance range must satisfy 1 <= min <= max")
        if not 0 < self.min_extent < self.max_extent <= 1:
            raise ValueError("extent range must satisfy 0 < min < max <= 1")
        if self.size < 8:
            raise ValueError(f"image size {self.size} too small")


@dataclass(frozen=True)
class SplitConfig:
    n_total: int
    mask_fraction: float
    seed: int = 0

    @property
    def n_masked(self) -> int:
        return math.ceil(self.mask_fraction * self.n_total - 1e-9)

    def __post_init__(self):
        if not 0 < self.mask_fraction <= 1:
            raise ValueError(f"mask_fraction must lie in (0, 1], got {self.mask_fraction}")
        if self.n_masked < 1:
            raise ValueError("split would contain no mask-annotated sample")


@dataclass
class Instance:
    label: int
    box: Box
    mask: np.ndarray  # bool H×W


@dataclass
class SynthSample:
    image: np.ndarray  # float32 3×H×W in [0, 1]
    instances: list[Instance] = field(default_factory=list)
    has_mask: bool = True

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def instance_map(self) -> np.ndarray:
        """uint8 H×W map; pixel value i+1 marks instance i, 0 is background."""
        out = np.zeros(self.size, dtype=np.uint8)
        for i, inst in enumerate(self.instances):
            out[inst.mask] = i + 1
        return out

    def label_map(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.int64)
        for inst in self.instances:
            out[inst.mask] = inst.label
        return out

    def classes(self) -> list[int]:
        return sorted({inst.label for inst in self.instances})

    def boxes(self, label: int | None = None) -> list[Box]:
        return [inst.box for inst in self.instances if label is None or inst.label == label]


def tight_box(mask: np.ndarray, label: int) -> Box:
    """Box whose edges are the outer pixel edges of ``mask``."""
    h, w = mask.shape
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    return Box(float(xs[0] / w), float(ys[0] / h), float((xs[-1] + 1) / w), float((ys[-1] + 1) / h), label=label)


def _shape_mask(kind: int, cx: float, cy: float, r: float, angle: float, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    # equilateral triangle inscribed in the circle of radius r
    ang = angle + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx, vy = cx + r * np.cos(ang), cy + r * np.sin(ang)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        inside &= cross >= 0
    return inside


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= out[:, :-1]
    out[:, :-1] |= out[:, 1:]
    return out


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.5, size=(3, 5, 5))
    idx = (np.arange(size) * 5) // size
    smooth = coarse[:, idx][:, :, idx]
    gray = rng.uniform(-0.05, 0.05, size=(1, size, size))
    return smooth * 0.5 + smooth.mean(axis=0, keepdims=True) * 0.5 + gray


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_sample(seed: int, cfg: DatasetConfig = DatasetConfig()) -> SynthSample:
    """Deterministic sample for ``seed``; image values are multiples of 1/255."""
    rng = np.random.default_rng(seed)
    size = cfg.size
    img = _background(rng, size)
    n_target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    labels: list[int] = []
    masks: list[np.ndarray] = []
    colors: list[np.ndarray] = []
    attempts = 0
    while len(masks) < n_target and attempts < 200:
        attempts += 1
        label = int(rng.integers(1, cfg.num_classes + 1))
        extent = rng.uniform(cfg.min_extent, cfg.max_extent) * size
        r = extent / 2
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        new = _shape_mask((label - 1) % 3, cx, cy, r, rng.uniform(0, 2 * np.pi), size)
        if new.sum() < 4:
            continue
        # occluded shapes must stay mostly visible
        if any(((m & ~new).sum() < cfg.min_visible * m.sum()) for m in masks):
            continue
        # same-colored shapes may not touch: they would merge into one blob
        grown = _dilate(new)
        if any(l == label and (grown & m).any() for l, m in zip(labels, masks)):
            continue
        masks = [m & ~new for m in masks]
        labels.append(label)
        masks.append(new)
        base = np.array(PALETTE[label - 1])
        colors.append(np.clip(base + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1))
    for m, col in zip(masks, colors):
        img[:, m] = col[:, None]
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    instances = [Instance(l, tight_box(m, l), m) for l, m in zip(labels, masks)]
    return SynthSample(_quantize(img), instances, True)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(seed: int, n: int, cfg: DatasetConfig = DatasetConfig()) -> list[SynthSample]:
    return [generate_sample(sample_seed(seed, i), cfg) for i in range(n)]


# --------------------------------------------------------------------------
# Augmentation

def _rebuild(sample: SynthSample, image: np.ndarray, masks: Sequence[np.ndarray],
             min_keep: Sequence[int] | None = None) -> SynthSample:
    """Recompute tight boxes; drop instances left with too few pixels."""
    out = []
    for i, (inst, m) in enumerate(zip(sample.instances, masks)):
        need = 1 if min_keep is None else max(1, min_keep[i])
        if m.sum() >= need:
            out.append(Instance(inst.label, tight_box(m, inst.label), m))
    return SynthSample(image, out, sample.has_mask)


def hflip(sample: SynthSample) -> SynthSample:
    return _rebuild(sample, np.ascontiguousarray(sample.image[:, :, ::-1]),
                    [np.ascontiguousarray(i.mask[:, ::-1]) for i in sample.instances])


def _resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = arr.shape[-2:]
    ys = ((np.arange(h) + 0.5) * sh / h).astype(np.int64)
    xs = ((np.arange(w) + 0.5) * sw / w).astype(np.int64)
    return arr[..., ys[:, None], xs[None, :]]


def expand(sample: SynthSample, rng: np.random.Generator, max_ratio: float = 1.6) -> SynthSample:
    """Paste onto a larger mean-colored canvas, then shrink back to the original size."""
    h, w = sample.size
    ratio = rng.uniform(1.0, max_ratio)
    ch, cw = int(round(h * ratio)), int(round(w * ratio))
    top = int(rng.integers(0, ch - h + 1))
    left = int(rng.integers(0, cw - w + 1))
    canvas = np.empty((3, ch, cw), dtype=np.float32)
    canvas[:] = sample.image.mean(axis=(1, 2), keepdims=True)
    canvas[:, top:top + h, left:left + w] = sample.image
    masks = []
    for inst in sample.instances:
        m = np.zeros((ch, cw), dtype=bool)
        m[top:top + h, left:left + w] = inst.mask
        masks.append(_resize_nearest(m, h, w))
    return _rebuild(sample, _resize_nearest(canvas, h, w), masks)


def random_crop(sample: SynthSample, rng: np.random.Generator, min_scale: float = 0.6,
                attempts: int = 20) -> SynthSample:
    """Crop a window keeping at least one instance center, resize back.

    Falls back to the unchanged sample after ``attempts`` failed draws.
    """
    h, w = sample.size
    for _ in range(attempts):
        s = rng.uniform(min_scale, 1.0)
        ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        centers = [((i.box.x_min + i.box.x_max) / 2 * w, (i.box.y_min + i.box.y_max) / 2 * h)
                   for i in sample.instances]
        if not any(left <= cx < left + cw and top <= cy < top + ch for cx, cy in centers):
            continue
        image = _resize_nearest(sample.image[:, top:top + ch, left:left + cw], h, w)
        masks = [_resize_nearest(i.mask[top:top + ch, left:left + cw], h, w) for i in sample.instances]
        # a shape cut down to a sliver is dropped; its pixels stay in the image
        keep = [int(0.3 * i.mask.sum() * (h * w) / (ch * cw)) for i in sample.instances]
        out = _rebuild(sample, image, masks, keep)
        if out.instances:
            return out
    return sample


def add_noise(sample: SynthSample, rng: np.random.Generator, sigma: float = 0.03) -> SynthSample:
    image = np.clip(sample.image + rng.normal(0, sigma, sample.image.shape), 0, 1).astype(np.float32)
    return SynthSample(image, list(sample.instances), sample.has_mask)


def augment(sample: SynthSample, rng: np.random.Generator, p: float = 0.5) -> SynthSample:
    """Flip, expand, crop and noise, each applied with probability ``p``."""
    if rng.random() < p:
        sample = hflip(sample)
    if rng.random() < p:
        sample = expand(sample, rng)
    if rng.random() < p:
        sample = random_crop(sample, rng)
    if rng.random() < p:
        sample = add_noise(sample, rng)
    return sample


def random_class_subsets(sample: SynthSample, rng: np.random.Generator) -> dict[int, list[int]]:
    """For each present class, a random nonempty subset of its instance indices."""
    out = {}
    for label in sample.classes():
        idx = [i for i, inst in enumerate(sample.instances) if inst.label == label]
        k = int(rng.integers(1, len(idx) + 1))
        out[label] = sorted(rng.choice(idx, size=k, replace=False).tolist())
    return out


# --------------------------------------------------------------------------
# Semi-supervised split

def make_split(cfg: SplitConfig, sample_classes: Sequence[Sequence[int]],
               num_classes: int) -> list[bool]:
    """Flag exactly ``cfg.n_masked`` samples as mask-annotated.

    Samples are drawn in a seeded random order, after first picking, for each
    class in turn, the earliest-ordered sample containing it.
    """
    if len(sample_classes) != cfg.n_total:
        raise ValueError(f"split expects {cfg.n_total} samples, got {len(sample_classes)}")
    order = np.random.default_rng(cfg.seed).permutation(cfg.n_total)
    present = [set(c) for c in sample_classes]
    missing = [c for c in range(1, num_classes + 1) if not any(c in s for s in present)]
    if missing:
        raise ValueError(f"cannot stratify split: classes {missing} absent from the corpus")
    chosen: list[int] = []
    covered: set[int] = set()
    for c in range(1, num_classes + 1):
        if c in covered:
            continue
        i = next(int(i) for i in order if c in present[i])
        chosen.append(i)
        covered |= present[i]
    if len(chosen) > cfg.n_masked:
        raise ValueError(f"cannot cover {num_classes} classes with {cfg.n_masked} masked samples")
    taken = set(chosen)
    for i in order:
        if len(chosen) == cfg.n_masked:
            break
        if int(i) not in taken:
            chosen.append(int(i))
            taken.add(int(i))
    flags = [False] * cfg.n_total
    for i in chosen:
        flags[i] = True
    return flags


def apply_split(samples: list[SynthSample], flags: Sequence[bool]) -> list[SynthSample]:
    return [replace(s, has_mask=bool(f)) for s, f in zip(samples, flags)]


# --------------------------------------------------------------------------
# PPM / PGM

_WS = b" \t\n\r\f\v"


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = path.read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(data) and (data[pos] in _WS or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataFormatError(path, pos, "truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise DataFormatError(path, 0, f"expected magic {magic!r}, found {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataFormatError(path, pos, f"non-integer header field in {tokens[1:]!r}") from None
    if maxval != 255 or width < 1 or height < 1:
        raise DataFormatError(path, pos, f"unsupported geometry {width}x{height} maxval {maxval}")
    if pos >= len(data) or data[pos] not in _WS:
        raise DataFormatError(path, pos, "missing whitespace after header")
    pos += 1
    need = width * height * channels
    if len(data) - pos < need:
        raise DataFormatError(path, len(data), f"truncated pixel data: need {need} bytes from "
                                               f"offset {pos}, file ends at {len(data)}")
    if len(data) - pos > need:
        raise DataFormatError(path, pos + need, "trailing bytes after pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(height, width, channels)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0, 1] as binary 8-bit PPM."""
    _, h, w = image.shape
    pix = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pix.tobytes())


def read_ppm(path) -> np.ndarray:
    arr = _read_pnm(Path(path), b"P6", 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5", 1)[:, :, 0].copy()


# --------------------------------------------------------------------------
# Dataset directories

_STEM = re.compile(r"^(\d{5})\.json$")


def write_dataset(samples: Sequence[SynthSample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        write_ppm(d / f"{stem}.ppm", s.image)
        write_pgm(d / f"{stem}.inst.pgm", s.instance_map())
        meta = {
            "schema_version": SCHEMA_VERSION,
            "has_mask": bool(s.has_mask),
            "height": s.size[0],
            "width": s.size[1],
            "instances": [{"class": inst.label, "box": list(inst.box.coords())} for inst in s.instances],
        }
        (d / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_meta(path: Path) -> dict:
    raw = path.read_bytes()
    try:
        meta = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise DataFormatError(path, exc.start, "invalid UTF-8") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(path, len(exc.doc[:exc.pos].encode()), exc.msg) from None
    if not isinstance(meta, dict) or meta.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(path, 0, f"unsupported schema_version {meta.get('schema_version') if isinstance(meta, dict) else None!r}")
    for key in ("has_mask", "height", "width", "instances"):
        if key not in meta:
            raise DataFormatError(path, 0, f"missing field {key!r}")
    return meta


def read_sample(directory, stem: str) -> SynthSample:
    d = Path(directory)
    meta_path = d / f"{stem}.json"
    meta = _read_meta(meta_path)
    image = read_ppm(d / f"{stem}.ppm")
    inst_path = d / f"{stem}.inst.pgm"
    inst_map = read_pgm(inst_path)
    h, w = meta["height"], meta["width"]
    if image.shape != (3, h, w):
        raise DataFormatError(d / f"{stem}.ppm", 0, f"image is {image.shape[1:]}, metadata says {(h, w)}")
    if inst_map.shape != (h, w):
        raise DataFormatError(inst_path, 0, f"instance map is {inst_map.shape}, metadata says {(h, w)}")
    instances = []
    for i, rec in enumerate(meta["instances"]):
        try:
            box = Box(*(float(v) for v in rec["box"]), label=int(rec["class"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(meta_path, 0, f"instance {i}: {exc}") from None
        instances.append(Instance(box.label, box, inst_map == i + 1))
    if inst_map.max(initial=0) > len(instances):
        raise DataFormatError(inst_path, 0, f"instance index {inst_map.max()} exceeds {len(instances)} instances")
    return SynthSample(image, instances, bool(meta["has_mask"]))


def list_stems(directory) -> list[str]:
    """Sample stems in the directory, ignoring unrelated files."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    return sorted(m.group(1) for m in (_STEM.match(n) for n in os.listdir(d)) if m)


def read_dataset(directory) -> list[SynthSample]:
    return [read_sample(directory, stem) for stem in list_stems(directory)]
