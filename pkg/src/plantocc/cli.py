"""Command-line entry point: ``plantocc <command> ...``.

Exit codes: 0 success, 1 a check exceeded its tolerance, 2 bad input.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import io
from .objectives import LossConfig
from .pipeline import (
    cmd_eval,
    cmd_generate,
    cmd_label,
    cmd_losscheck,
    cmd_predict,
    cmd_verify,
    default_workers,
    generation_config,
    label_settings,
    load_section,
)
from .raycast import CameraSpec
from .scene import PlacementError
from .scorer import ScorerConfig, ScorerWeights

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


def _emit(obj, out: str | None) -> None:
    if out:
        io.write_json(out, obj)
    else:
        sys.stdout.write(io.dumps(obj) + "\n")


def _generate(args) -> int:
    m = cmd_generate(generation_config(args.config), args.count, args.seed, args.out)
    _emit({"generated": m.extra["generated"], "skipped": m.extra["skipped"], "out": str(args.out)}, None)
    return EXIT_OK


def _label(args) -> int:
    config, graph = label_settings(args.config)
    workers = args.workers if args.workers is not None else default_workers()
    m = cmd_label(args.scenes, config, workers, args.out, graph)
    _emit({"labelled": m.extra["scenes"], "workers": workers, "wall_time": m.wall_time}, None)
    return EXIT_OK


def _verify(args) -> int:
    camera = CameraSpec(args.projection, args.standoff, math.radians(args.fov_deg), args.jitter_deg, 1)
    report, ok = cmd_verify(args.scenes, camera, args.labels, args.seed, args.tolerance)
    _emit(report, args.out)
    return EXIT_OK if ok else EXIT_CHECK


def _predict(args) -> int:
    weights = None
    if args.mode == "scorer":
        weights = ScorerWeights.load(args.weights) if args.weights else ScorerWeights.random(ScorerConfig(), args.seed)
    _emit(cmd_predict(args.labels, args.mode, args.scenes, weights), args.out)
    return EXIT_OK


def _eval(args) -> int:
    preds = io.read_json(args.preds)
    report = cmd_eval(args.labels, preds, args.tau)
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def _losscheck(args) -> int:
    preds = io.read_json(args.preds)
    config = LossConfig.from_dict(load_section(args.loss_config, "loss"))
    report, ok = cmd_losscheck(args.labels, preds, config, args.tolerance)
    _emit(report, args.out)
    if not ok:
        sys.stderr.write("gradient check failed for: " + ", ".join(report["failing_ops"]) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


def _weights(args) -> int:
    ScorerWeights.random(ScorerConfig(temperature=args.temperature), args.seed).save(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plantocc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic scenes")
    g.add_argument("--config", type=Path)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=_generate)

    lab = sub.add_parser("label", help="compute occlusion labels and graph records")
    lab.add_argument("--scenes", type=Path, required=True)
    lab.add_argument("--config", type=Path)
    lab.add_argument("--workers", type=int, help="default: $PLANTOCC_WORKERS or 1")
    lab.add_argument("--out", type=Path, help="default: the scenes directory")
    lab.set_defaults(func=_label)

    v = sub.add_parser("verify", help="cross-check labels with a ray-cast camera")
    v.add_argument("--scenes", type=Path, required=True)
    v.add_argument("--labels", type=Path, help="default: the scenes directory")
    v.add_argument("--projection", choices=["ortho", "persp"], default="ortho")
    v.add_argument("--jitter-deg", type=float, default=0.0)
    v.add_argument("--standoff", type=float, default=3.0)
    v.add_argument("--fov-deg", type=float, default=40.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=0.05)
    v.add_argument("--out", type=Path)
    v.set_defaults(func=_verify)

    pr = sub.add_parser("predict", help="write a prediction bundle")
    pr.add_argument("--labels", type=Path, required=True)
    pr.add_argument("--scenes", type=Path, help="default: the labels directory")
    pr.add_argument("--mode", choices=["oracle", "scorer"], default="oracle")
    pr.add_argument("--weights", type=Path, help="scorer weight file (default: seeded random weights)")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", type=Path)
    pr.set_defaults(func=_predict)

    e = sub.add_parser("eval", help="score predictions against labels")
    e.add_argument("--labels", type=Path, required=True)
    e.add_argument("--preds", type=Path, required=True)
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=_eval)

    lc = sub.add_parser("losscheck", help="loss values with finite-difference gradient checks")
    lc.add_argument("--labels", type=Path, required=True)
    lc.add_argument("--preds", type=Path, required=True)
    lc.add_argument("--loss-config", type=Path)
    lc.add_argument("--tolerance", type=float, default=1e-4)
    lc.add_argument("--out", type=Path)
    lc.set_defaults(func=_losscheck)

    w = sub.add_parser("init-weights", help="write seeded random scorer weights")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--temperature", type=float, default=1.0)
    w.add_argument("--out", type=Path, required=True)
    w.set_defaults(func=_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, PlacementError) as exc:
        sys.stderr.write(f"plantocc {args.command}: error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
