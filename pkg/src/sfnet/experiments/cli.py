"""``sfnet`` command line: one subcommand per experiment."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from sfnet import data
from sfnet.experiments import commands
from sfnet.experiments import config as run_config
from sfnet.experiments.checkpoint import CheckpointError

logger = logging.getLogger("sfnet")


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text


def _model_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise run_config.ConfigError(f"--model expects key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--data", help="'synthetic' or a directory with real/ and fake/ subfolders")
    p.add_argument("--per-class", type=int, dest="synth_per_class",
                   help="synthetic samples per class")
    p.add_argument("--preset", choices=sorted(run_config.PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", help="comma-separated transforms, e.g. random_crop,mixup")
    p.add_argument("--model", action="append", metavar="KEY=VALUE",
                   help="model setting override (repeatable), e.g. base_channels=16")
    p.add_argument("--output-dir", help=f"run directory (relative paths honour ${run_config.OUTPUT_ROOT_ENV})")


def build_run_config(args) -> run_config.RunConfig:
    doc = {}
    if args.config is not None:
        with open(args.config, "rb") as fh:
            try:
                doc = run_config.tomllib.load(fh)
            except run_config.tomllib.TOMLDecodeError as exc:
                raise run_config.ConfigError(f"{args.config}: {exc}") from exc
    overrides = {
        "data": args.data,
        "synth_per_class": args.synth_per_class,
        "preset": args.preset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "output_dir": args.output_dir,
    }
    if args.augment is not None:
        overrides["augment"] = tuple(t for t in args.augment.split(",") if t)
    model = _model_overrides(args.model)
    if model:
        overrides["model"] = {**doc.get("model", {}), **model}
    return run_config.from_mapping(doc, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfnet", description="Spatial+frequency forgery detector experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write history, checkpoint and config")
    _add_run_options(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("checkpoint", type=Path)
    _add_run_options(p)
    p.add_argument("--out", type=Path, help="metrics JSON path (default: next to the checkpoint)")

    p = sub.add_parser("ablate-branches", help="train the six branch/attention variants")
    _add_run_options(p)

    p = sub.add_parser("sweep-lowfreq", help="train once per high-pass scale")
    _add_run_options(p)
    p.add_argument("--scales", default=",".join(str(s) for s in commands.DEFAULT_SCALES),
                   help="comma-separated scales (each > 2)")

    p = sub.add_parser("ablate-augment", help="train once per augmentation policy")
    _add_run_options(p)

    p = sub.add_parser("dct-viz", help="per-class mean DCT spectra as PNG heatmaps")
    _add_run_options(p)
    p.add_argument("--out", type=Path, default=Path("dct"), help="output directory")

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap of one image")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--target-class", type=int, default=1, choices=(0, 1))
    p.add_argument("--layer", default=None, help="refine.<i>; default is the last group")
    p.add_argument("--out", type=Path, default=Path("gradcam.png"))
    return parser


def _emit_rows(rows) -> None:
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def run(args) -> int:
    cmd = args.command
    if cmd == "gradcam":
        cam = commands.cmd_gradcam(args.checkpoint, args.image, args.target_class, args.layer, args.out)
        print(json.dumps({"out": str(args.out), "shape": list(cam.shape),
                          "min": float(cam.min()), "max": float(cam.max())}))
        return 0
    if cmd == "eval":
        has_run_opts = args.config is not None or any(
            getattr(args, k) is not None for k in ("data", "synth_per_class", "preset", "seed", "model"))
        rc = build_run_config(args) if has_run_opts else None
        report = commands.cmd_eval(args.checkpoint, rc, args.out)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    rc = build_run_config(args)
    if cmd == "train":
        result = commands.cmd_train(rc)
        print(json.dumps({"run_dir": str(result.run_dir), "checkpoint": str(result.checkpoint),
                          "final": result.final}, sort_keys=True))
    elif cmd == "ablate-branches":
        _emit_rows(commands.cmd_ablate_branches(rc))
    elif cmd == "sweep-lowfreq":
        try:
            scales = [float(s) for s in args.scales.split(",") if s]
        except ValueError as exc:
            raise run_config.ConfigError(f"bad --scales: {exc}") from exc
        _emit_rows(commands.cmd_sweep_lowfreq(rc, scales))
    elif cmd == "ablate-augment":
        _emit_rows(commands.cmd_ablate_augment(rc))
    elif cmd == "dct-viz":
        splits = commands.prepare_data(rc)
        out = commands.cmd_dct_viz(splits.manifest, args.out)
        print(json.dumps({"out": str(args.out), "files": sorted(f"dct_{k}.png" for k in out["images"])}))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (run_config.ConfigError, data.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return 3
    except (commands.RunError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
