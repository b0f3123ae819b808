"""
Command-line entry point for the DSA-LTD pipeline.

    python cli.py gen-data --config phantoms.json --out data/
    python cli.py select-keyframe --video data/sample_0000
    python cli.py extract-motion --video data/sample_0000 --kind optical_flow --out maps/
    python cli.py train --data data/ --config train.json --out runs/full
    python cli.py evaluate --data data/ --checkpoint runs/full/best.pt --out runs/full/eval
    python cli.py ablate --data data/ --config train.json --out runs/ablation

Configs are flat JSON objects; --override key=value (repeatable) and --seed
take precedence. Config errors exit with 2, runtime failures with 1, both
with a one-line JSON error on stderr.
"""

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import orjson
from PIL import Image

from ablation import canonical_variants, emit_report, run_ablation, variants_by_name
from constants import FRAME_DIFF_OFFSET, KEY_FRAME_WINDOW, MANIFEST_NAME
from core import to_uint8
from dataset import load_video, read_manifest
from keyframe import select_key_frame
from logging_config import logger, setup_logging
from losses import LossWeights
from motion import MOTION_KINDS, extract_motion
from synthgen import PhantomConfig, generate_dataset
from train_model import TrainConfig, evaluate, train
from utils import dump_json, load_json

LOSS_WEIGHT_KEYS = tuple(f.name for f in fields(LossWeights))
TRAIN_EXTRA_DEFAULTS: Dict[str, Any] = {"variant": "dsa-ltdnet"}
ABLATE_EXTRA_DEFAULTS: Dict[str, Any] = {
    "variants": [v.name for v in canonical_variants()],
    "offset_sweep": False,
}


class ConfigError(ValueError):
    """Invalid command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def parse_override(item: str) -> Tuple[str, Any]:
    """'key=value' with value read as a JSON literal, else kept as a string."""
    key, sep, text = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = orjson.loads(text)
    except orjson.JSONDecodeError:
        value = text
    return key.strip(), value


def load_raw_config(args: argparse.Namespace) -> Dict[str, Any]:
    raw: Dict[str, Any] = {}
    if args.config:
        try:
            raw = load_json(args.config)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {args.config} must be a JSON object")
    for item in args.override or []:
        key, value = parse_override(item)
        raw[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    return raw


def coerce(name: str, value: Any, default: Any) -> Any:
    """Check a config value against the type of its default."""

    def fail(expected: str) -> ConfigError:
        return ConfigError(f"{name}: expected {expected}, got {value!r}")

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise fail("a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise fail("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise fail("a string")
        return value
    if isinstance(default, (tuple, list)) or default is None:
        if value is None and default is None:
            return None
        if not isinstance(value, list):
            raise fail("a list")
        return tuple(value) if isinstance(default, tuple) or default is None else value
    raise fail(type(default).__name__)


def split_known(
    raw: Dict[str, Any], defaults: Dict[str, Any], extra_defaults: Dict[str, Any]
) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Type-check raw keys; returns (dataclass kwargs, extra settings with defaults)."""
    unknown = sorted(set(raw) - set(defaults) - set(extra_defaults))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    known = {k: coerce(k, v, defaults[k]) for k, v in raw.items() if k in defaults}
    extras = dict(extra_defaults)
    extras.update({k: coerce(k, v, extra_defaults[k]) for k, v in raw.items() if k in extra_defaults})
    return known, extras


def _dataclass_defaults(cls) -> Dict[str, Any]:
    instance = cls()
    return {f.name: getattr(instance, f.name) for f in fields(cls)}


def build_phantom_config(raw: Dict[str, Any]) -> PhantomConfig:
    known, _ = split_known(raw, _dataclass_defaults(PhantomConfig), {})
    try:
        return PhantomConfig(**known)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def build_train_config(raw: Dict[str, Any], extra_defaults: Dict[str, Any]) -> Tuple[TrainConfig, Dict[str, Any]]:
    """Flat keys a / lambda0 / lambda1 fill TrainConfig.weights."""
    defaults = _dataclass_defaults(TrainConfig)
    weights_default = defaults.pop("weights")
    defaults.update({k: getattr(weights_default, k) for k in LOSS_WEIGHT_KEYS})
    known, extras = split_known(raw, defaults, extra_defaults)
    weights = {k: known.pop(k) for k in LOSS_WEIGHT_KEYS if k in known}
    try:
        return TrainConfig(weights=LossWeights(**weights), **known), extras
    except ValueError as e:
        raise ConfigError(str(e)) from e


def prepare_out(out: Path, resolved: Dict[str, Any], log_level: str) -> None:
    """Create the output directory, log to out/run.log and echo the resolved config."""
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(level=getattr(logging, log_level), log_file=str(out / "run.log"))
    dump_json(resolved, out / "config.json")


def _require_out(args: argparse.Namespace) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} requires --out")
    return Path(args.out)


def _print_json(obj: Any) -> None:
    sys.stdout.write(orjson.dumps(obj, option=orjson.OPT_SERIALIZE_NUMPY).decode("utf-8") + "\n")
    sys.stdout.flush()


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = _require_out(args)
    config = build_phantom_config(load_raw_config(args))
    if (out / MANIFEST_NAME).exists() and not args.overwrite:
        raise FileExistsError(f"{out / MANIFEST_NAME} exists; pass --overwrite to regenerate")
    prepare_out(out, config.to_dict(), args.log_level)
    manifest = generate_dataset(config, out, overwrite=args.overwrite)
    _print_json({"manifest": str(out / MANIFEST_NAME), "samples": len(manifest.samples)})
    return 0


def cmd_select_keyframe(args: argparse.Namespace) -> int:
    if args.window < 3:
        raise ConfigError("--window must be >= 3")
    result = select_key_frame(load_video(args.video), window=args.window)
    _print_json(
        {
            "key_frame_index": result.index,
            "scores": [{"frame": i, "score": s} for i, s in result.scores],
        }
    )
    return 0


def cmd_extract_motion(args: argparse.Namespace) -> int:
    out = _require_out(args)
    video = load_video(args.video)
    frame = args.frame if args.frame is not None else select_key_frame(video).index
    prepare_out(
        out,
        {"video": str(args.video), "kind": args.kind, "frame": frame, "offset": args.offset},
        args.log_level,
    )
    motion = extract_motion(video, frame, args.kind, offset=args.offset)
    path = out / f"{args.kind}_frame_{frame:03d}.png"
    Image.fromarray(to_uint8(motion.pixels)).save(path)
    _print_json({"frame": frame, "kind": args.kind, "path": str(path)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out = _require_out(args)
    cfg, extras = build_train_config(load_raw_config(args), TRAIN_EXTRA_DEFAULTS)
    try:
        (variant,) = variants_by_name([extras["variant"]])
    except KeyError as e:
        raise ConfigError(str(e)) from e
    manifest = read_manifest(args.data)
    prepare_out(out, {**cfg.to_dict(), **extras}, args.log_level)
    bundle_config, variant_cfg = variant.configs(cfg)
    result = train(manifest, bundle_config, variant_cfg, out)
    _print_json(
        {
            "best_checkpoint": str(result.best_checkpoint),
            "best_epoch": result.best_epoch,
            "best_dice": result.best_score,
            "steps": result.steps,
        }
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = _require_out(args)
    if not args.checkpoint:
        raise ConfigError("evaluate requires --checkpoint")
    cfg, _ = build_train_config(load_raw_config(args), {})
    manifest = read_manifest(args.data)
    prepare_out(out, {**cfg.to_dict(), "checkpoint": str(args.checkpoint), "split": args.split}, args.log_level)
    report = evaluate(manifest, args.checkpoint, args.split, cfg.threshold, device=cfg.device)
    dump_json(report.to_dict(), out / "evaluation.json")
    _print_json({"mean_dice": report.mean_dice, "samples": len(report.scores)})
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    out = _require_out(args)
    cfg, extras = build_train_config(load_raw_config(args), ABLATE_EXTRA_DEFAULTS)
    try:
        variants = variants_by_name(extras["variants"], offset_sweep=extras["offset_sweep"])
    except KeyError as e:
        raise ConfigError(str(e)) from e
    manifest = read_manifest(args.data)
    prepare_out(out, {**cfg.to_dict(), **extras}, args.log_level)
    report = run_ablation(manifest, variants, cfg, out)
    files, failures = emit_report(report, out, manifest)
    _print_json(
        {
            "variants": {r.variant.name: r.status for r in report.results},
            "files": len(files),
            "write_failures": len(failures),
        }
    )
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat JSON config file")
    common.add_argument("--out", help="Output directory; nothing is written outside it")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="Override one config key; VALUE is parsed as JSON, else taken as a string (repeatable)",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO)",
    )

    parser = _Parser(description="DSA-LTD tumor segmentation pipeline on synthetic DSA phantoms.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("gen-data", parents=[common], help="Generate a phantom dataset")
    p.add_argument("--overwrite", action="store_true", help="Replace an existing dataset manifest")
    p.set_defaults(handler=cmd_gen_data)

    p = subparsers.add_parser("select-keyframe", parents=[common], help="Print the key frame of a video")
    p.add_argument("--video", required=True, help="Directory of frame_###.png files")
    p.add_argument("--window", type=int, default=KEY_FRAME_WINDOW, help="Trailing frames to scan (default: 15)")
    p.set_defaults(handler=cmd_select_keyframe)

    p = subparsers.add_parser("extract-motion", parents=[common], help="Write one classical motion map")
    p.add_argument("--video", required=True, help="Directory of frame_###.png files")
    p.add_argument("--kind", required=True, choices=MOTION_KINDS, help="Motion map to compute")
    p.add_argument("--frame", type=int, help="Frame index (default: the selected key frame)")
    p.add_argument("--offset", type=int, default=FRAME_DIFF_OFFSET, help="Frame-difference offset (default: 9)")
    p.set_defaults(handler=cmd_extract_motion)

    p = subparsers.add_parser("train", parents=[common], help="Train one model variant")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.set_defaults(handler=cmd_train)

    p = subparsers.add_parser("evaluate", parents=[common], help="Score a checkpoint on a split")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--checkpoint", help="Checkpoint file")
    p.add_argument("--split", default="test", choices=["train", "test"], help="Split to score (default: test)")
    p.set_defaults(handler=cmd_evaluate)

    p = subparsers.add_parser("ablate", parents=[common], help="Run the ablation study and write reports")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.set_defaults(handler=cmd_ablate)
    return parser


def _report_error(kind: str, error: BaseException) -> None:
    line = orjson.dumps({"error": kind, "message": str(error)}).decode("utf-8")
    sys.stderr.write(line + "\n")
    sys.stderr.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except ConfigError as e:
        _report_error("config_error", e)
        return 2
    except Exception as e:
        logger.critical(f"Command failed: {e}")
        _report_error(type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
