"""Runs every CLI command once at tiny settings and collects what it produced."""

import contextlib
import io
from pathlib import Path

from dasnet.harness.cli import main


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def run_ok(argv):
    code, out, err = run(argv)
    if code != 0:
        raise AssertionError(f"{argv[0]} failed: {err}")
    return out


def pipeline(work: Path) -> dict[str, bytes]:
    """Artifacts keyed by name: stdout of each command plus every file written."""
    data, test = work / "data", work / "test"
    det, sem, inst = work / "det.ckpt", work / "sem.ckpt", work / "inst.ckpt"
    out = {
        "gen-data": run_ok(["gen-data", "--seed", 3, "--n", 12, "--mask-fraction", 0.5, "--size", 32, "--out", data]),
        "gen-test": run_ok(["gen-data", "--seed", 4, "--n", 4, "--mask-fraction", 1, "--size", 32, "--out", test]),
        "train-detector": run_ok(["train-detector", "--data", data, "--steps", 3, "--batch", 2, "--seed", 1,
                                  "--out", det]),
        "train-semantic": run_ok(["train-semantic", "--data", data, "--detector", det, "--steps", 2, "--batch", 2,
                                  "--seed", 1, "--out", sem]),
        "train-instance": run_ok(["train-instance", "--data", data, "--detector", det, "--k", 3, "--steps", 2,
                                  "--batch", 2, "--seed", 1, "--out", inst]),
        "eval-detector": run_ok(["eval-detector", "--data", test, "--ckpt", det]),
        "eval-semantic": run_ok(["eval-semantic", "--data", test, "--ckpt", sem]),
        "eval-instance": run_ok(["eval-instance", "--data", test, "--ckpt", inst]),
        "predict-semantic": run_ok(["predict", "--image", test / "00000.ppm", "--ckpt", sem, "--mode", "semantic",
                                    "--render", work / "sem.ppm"]),
        "predict-instance": run_ok(["predict", "--image", test / "00000.ppm", "--ckpt", inst, "--mode", "instance",
                                    "--render", work / "inst.ppm"]),
    }
    artifacts = {f"stdout:{k}": v.replace(str(work), "<work>").encode() for k, v in out.items()}
    for p in sorted(work.rglob("*")):
        if p.is_file():
            artifacts[f"file:{p.relative_to(work)}"] = p.read_bytes()
    return artifacts
