"""Command-line entry point.

Every run-configuration key is also a flag (``sampler_steps`` becomes
``--sampler-steps``). Values come from the defaults, then ``--config``,
then flags. Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pipeline, storage
from .config import RunConfig, load_config
from .data import generate_scene, random_scene_params
from .errors import ConfigError, NumericalError, PhaseError

log = logging.getLogger("videdit")

RUN_COMMANDS = {
    "edit": "edit",
    "reconstruct": "reconstruct",
    "baseline-generate": "baseline_generate",
    "baseline-sdedit": "baseline_sdedit",
}
EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OTHER = 2, 3, 1


def _add_config_flags(parser: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    parser.add_argument("--config", help="YAML file with run configuration keys")
    group = parser.add_argument_group("configuration keys (override --config)")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if "bool" in str(f.type):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                               help=f"default: {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videdit", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the image model on procedural captioned images")
    _add_config_flags(p, skip=("mode",))
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=f"{name} run (writes artifacts to --output-dir)")
        _add_config_flags(p, skip=("mode",))

    p = sub.add_parser("evaluate", help="recompute the report of a finished run directory")
    p.add_argument("run_dir")
    p.add_argument("--no-text-alignment", action="store_true")
    p.add_argument("--output", help="CSV path (default: RUN_DIR/evaluation.csv)")

    p = sub.add_parser("make-data", help="write procedural source clips with masks and captions")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-frames", type=int, default=8)
    p.add_argument("--png", action="store_true", help="also write per-frame PNG directories")
    return parser


def config_from_args(args: argparse.Namespace, mode: Optional[str] = None) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    if mode is not None:
        overrides["mode"] = mode
    return load_config(args.config, overrides)


def cmd_pretrain(args) -> int:
    config = config_from_args(args)
    path = config.weights_path()
    _, losses = pipeline.pretrain(config, path)
    print(f"weights: {path}")
    print(f"loss first/last: {losses[0]:.5f} {losses[-1]:.5f}" if losses else "no training steps")
    return 0


def cmd_run(args) -> int:
    config = config_from_args(args, RUN_COMMANDS[args.command]).validate()
    report = pipeline.run(config)
    out = config.output_path()
    print(f"artifacts: {out}")
    print(f"{report.method}: psnr={report.psnr_db:.3f} mask_iou={report.mask_iou} "
          f"frame_consistency={report.frame_consistency}")
    return 0


def cmd_evaluate(args) -> int:
    reports = pipeline.evaluate_run(args.run_dir, use_text_alignment=not args.no_text_alignment)
    path = Path(args.output) if args.output else Path(args.run_dir) / "evaluation.csv"
    pipeline.emit_report(reports, path)
    for r in reports:
        print(",".join(str(v) for v in r.row()))
    return 0


def cmd_make_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    index = []
    for k in range(args.count):
        params = random_scene_params(rng, num_frames=args.num_frames)
        scene = generate_scene(params, seed=args.seed * 1000 + k)
        stem = f"scene_{k:03d}"
        storage.save_video(out / f"{stem}.npz", scene.frames)
        np.savez(out / f"{stem}_masks.npz", masks=scene.masks)
        if args.png:
            storage.save_video(out / stem, scene.frames[:, :3])
        index.append({"video": f"{stem}.npz", "caption": scene.caption, "color": params.color,
                      "shape": params.shape, "direction": params.direction})
    (out / "captions.json").write_text(json.dumps(index, indent=2))
    print(f"{args.count} clips in {out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {"pretrain": cmd_pretrain, "evaluate": cmd_evaluate, "make-data": cmd_make_data}
    handler = handlers.get(args.command, cmd_run)
    try:
        return handler(args)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc.cause, NumericalError):
            return EXIT_NUMERICAL
        return EXIT_OTHER
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
