"""Command line: data generation, stage-wise training, evaluation and prediction.

Every command accepts ``--config FILE`` holding a JSON object keyed by flag
names (dashes or underscores); flags given on the command line win.
Failures print one ``error: type=<Name> message=<json string>`` line to
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import (DatasetConfig, SplitConfig, apply_split, generate_dataset, make_split, read_dataset,
                    read_ppm, write_dataset)
from ..decoder import semantic_infer
from ..detector import DetectorConfig, detect
from ..instance import PSConfig, instance_infer
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import evaluate_detector, evaluate_instance, evaluate_semantic
from .render import render_overlay
from .train import TrainConfig, TrainResult, model_from_checkpoint, train_detector, train_instance, train_semantic

# per command: flag -> (type, default); None default means required
COMMANDS: dict[str, dict[str, tuple]] = {
    "gen-data": {"seed": (int, 0), "n": (int, 2000), "classes": (int, 3), "mask_fraction": (float, 0.125),
                 "size": (int, 64), "out": (str, None)},
    "train-detector": {"data": (str, None), "steps": (int, 3000), "lr": (float, 0.01), "batch": (int, 8),
                       "seed": (int, 0), "out": (str, None)},
    "train-semantic": {"data": (str, None), "detector": (str, None), "steps": (int, 1500), "lr": (float, 0.01),
                       "batch": (int, 8), "seed": (int, 0), "out": (str, None)},
    "train-instance": {"data": (str, None), "detector": (str, None), "k": (int, 7), "p": (int, 2), "n": (int, 4),
                       "steps": (int, 1500), "lr": (float, 0.02), "batch": (int, 8), "seed": (int, 0),
                       "out": (str, None)},
    "eval-detector": {"data": (str, None), "ckpt": (str, None)},
    "eval-semantic": {"data": (str, None), "ckpt": (str, None)},
    "eval-instance": {"data": (str, None), "ckpt": (str, None), "thresholds": (str, "0.5,0.7")},
    "predict": {"image": (str, None), "ckpt": (str, None), "mode": (str, "semantic"), "render": (str, None)},
}


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with flag values")
        for flag, (typ, default) in flags.items():
            hint = "required" if default is None else f"default {default}"
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None, help=hint)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    flags = COMMANDS[command]
    values = {k: d for k, (_, d) in flags.items()}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        for key, v in raw.items():
            k = key.replace("-", "_")
            if k not in flags:
                raise UsageError(f"unknown config key {key!r} for {command}")
            values[k] = flags[k][0](v)
    for k in flags:
        v = getattr(args, k)
        if v is not None:
            values[k] = v
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return values


def _load_data(path: str):
    samples = read_dataset(path)
    if not samples:
        raise FileNotFoundError(f"no samples found in {path}")
    return samples


def _write_training(result: TrainResult, out: str) -> None:
    save_checkpoint(result.checkpoint, out)
    with open(out + ".loss.tsv", "w") as fh:
        fh.write("step\tloss\n")
        for i, v in enumerate(result.losses):
            fh.write(f"{i}\t{v:.9g}\n")
    print(f"steps={len(result.losses)}")
    print(f"final_loss={result.losses[-1]:.6f}")
    print(f"checkpoint={out}")


def cmd_gen_data(v: dict) -> None:
    cfg = DatasetConfig(num_classes=v["classes"], size=v["size"])
    samples = generate_dataset(v["seed"], v["n"], cfg)
    flags = make_split(SplitConfig(v["n"], v["mask_fraction"], v["seed"]), [s.classes() for s in samples],
                       v["classes"])
    write_dataset(apply_split(samples, flags), v["out"])
    print(f"samples={len(samples)}")
    print(f"masked={sum(flags)}")


def cmd_train_detector(v: dict) -> None:
    samples = _load_data(v["data"])
    classes = max((i.label for s in samples for i in s.instances), default=1)
    det = DetectorConfig(num_classes=classes, image_size=samples[0].size[0])
    tcfg = TrainConfig("detector", v["steps"], v["lr"], v["batch"], seed=v["seed"])
    _write_training(train_detector(tcfg, samples, det), v["out"])


def cmd_train_semantic(v: dict) -> None:
    samples = _load_data(v["data"])
    tcfg = TrainConfig("semantic", v["steps"], v["lr"], v["batch"], seed=v["seed"])
    _write_training(train_semantic(tcfg, samples, load_checkpoint(v["detector"])), v["out"])


def cmd_train_instance(v: dict) -> None:
    samples = _load_data(v["data"])
    tcfg = TrainConfig("instance", v["steps"], v["lr"], v["batch"], seed=v["seed"])
    ps = PSConfig(k=v["k"], p=v["p"], n=v["n"])
    _write_training(train_instance(tcfg, samples, load_checkpoint(v["detector"]), ps), v["out"])


def cmd_eval_detector(v: dict) -> None:
    model = model_from_checkpoint(load_checkpoint(v["ckpt"]))
    print(f"recall@0.5={evaluate_detector(model, _load_data(v['data'])):.6f}")


def cmd_eval_semantic(v: dict) -> None:
    model = model_from_checkpoint(load_checkpoint(v["ckpt"]))
    res = evaluate_semantic(model, _load_data(v["data"]))
    for c, val in sorted(res.per_class.items()):
        print(f"iou_{c}={val:.6f}")
    print(f"miou={res.mean:.6f}")


def parse_thresholds(text: str) -> list[float]:
    try:
        out = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad thresholds {text!r}; expected comma-separated numbers") from None
    if not out or any(not 0 < t < 1 for t in out):
        raise UsageError(f"thresholds must lie in (0, 1), got {text!r}")
    return out


def cmd_eval_instance(v: dict) -> None:
    thresholds = parse_thresholds(v["thresholds"])
    model = model_from_checkpoint(load_checkpoint(v["ckpt"]))
    res = evaluate_instance(model, _load_data(v["data"]), thresholds)
    for t in thresholds:
        print(f"map_r@{t:g}={res[t]:.6f}")


def cmd_predict(v: dict) -> None:
    if v["mode"] not in ("semantic", "instance"):
        raise UsageError(f"mode must be semantic or instance, got {v['mode']!r}")
    model = model_from_checkpoint(load_checkpoint(v["ckpt"]))
    if model.stage != v["mode"]:
        raise UsageError(f"{v['mode']} prediction needs a {v['mode']} checkpoint, got {model.stage!r}")
    image = read_ppm(v["image"])
    expect = (model.det.image_size, model.det.image_size)
    if image.shape[1:] != expect:
        raise UsageError(f"image is {image.shape[2]}x{image.shape[1]}, model expects {expect[1]}x{expect[0]}")
    (dets,), _ = detect(model.store, model.det, image[None])
    if v["mode"] == "semantic":
        label_map = semantic_infer(model.store, model.det, model.dec, image, dets)
        render_overlay(image, v["render"], label_map=label_map)
        for c in range(1, model.det.num_classes + 1):
            print(f"pixels_{c}={int(np.count_nonzero(label_map == c))}")
    else:
        preds = instance_infer(model.store, model.det, model.dec, model.ps, image, dets)
        render_overlay(image, v["render"], instances=[(p.mask, p.box) for p in preds])
        for i, p in enumerate(preds):
            b = p.box
            print(f"instance_{i}=class:{p.label},score:{p.score:.6f},box:{b.x_min:.4f}:{b.y_min:.4f}:"
                  f"{b.x_max:.4f}:{b.y_max:.4f},pixels:{int(p.mask.sum())}")
    print(f"render={v['render']}")


HANDLERS = {
    "gen-data": cmd_gen_data, "train-detector": cmd_train_detector, "train-semantic": cmd_train_semantic,
    "train-instance": cmd_train_instance, "eval-detector": cmd_eval_detector,
    "eval-semantic": cmd_eval_semantic, "eval-instance": cmd_eval_instance, "predict": cmd_predict,
}


def error_line(exc: BaseException) -> str:
    return f"error: type={type(exc).__name__} message={json.dumps(str(exc))}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        HANDLERS[args.command](resolve(args.command, args))
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 - every failure becomes one line
        print(error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
