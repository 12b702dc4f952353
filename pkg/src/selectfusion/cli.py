"""Command-line entry points: simulate | degrade | train | eval | report.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All artifacts are
written under the subcommand's --out-dir; fixed seeds make every
subcommand reproducible from the command line alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import degradation as deg
from . import harness, reporting, simulator

__all__ = ["main"]


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--out-dir", required=out_required, help="output directory")
    parser.add_argument("--quiet", action="store_true", help="suppress non-error output")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selectfusion",
        description="Synthetic multimodal odometry laboratory: generate data, "
        "corrupt it, train fusion models, and report results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate train/val/test episode files")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=64, help="training episodes (default 64)")
    p.add_argument("--val-episodes", type=int, default=16)
    p.add_argument("--test-episodes", type=int, default=16)
    p.add_argument("--frames", type=int, default=100, help="frames per episode (default 100)")
    p.add_argument(
        "--profile",
        default="random-smooth",
        choices=simulator.MOTION_PROFILES,
        help="motion profile",
    )
    p.add_argument("--d-a", type=int, default=simulator.DEFAULT_D_A)
    p.add_argument("--window", type=int, default=simulator.DEFAULT_WINDOW)
    p.add_argument("--sigma-a", type=float, default=0.01)
    p.add_argument("--sigma-b", type=float, default=0.01)

    p = sub.add_parser("degrade", help="apply sensor degradations to a dataset")
    _add_common(p)
    p.add_argument("--in-dir", required=True, help="directory with train/val/test jsonl files")
    p.add_argument(
        "--spec",
        default="none",
        choices=["none", *sorted(deg.SPEC_PRESETS)],
        help="degradation preset",
    )
    p.add_argument("--splits", default="train,val,test", help="comma list of splits to corrupt")
    for flag in (
        "occlusion-prob",
        "blur-prob",
        "frame-drop-prob",
        "imu-noise-prob",
        "imu-drop-prob",
        "spatial-prob",
        "temporal-prob",
    ):
        p.add_argument(f"--{flag}", type=float, default=None, help=f"override {flag}")

    p = sub.add_parser("train", help="train a model and write run artifacts")
    _add_common(p)
    p.add_argument("--config", required=True, help="experiment config (ini)")
    p.add_argument("--data-dir", default=None, help="override the config's dataset directory")
    p.add_argument("--fusion", default=None, choices=harness.FUSION_MODES, help="override fusion mode")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--train-seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset jsonl file")
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("report", help="render tables and SVG plots from run directories")
    _add_common(p)
    p.add_argument(
        "--run-dir", action="append", required=True, help="run directory (repeatable)"
    )
    return parser


def _cmd_simulate(args) -> int:
    if args.episodes < 1 or args.val_episodes < 1 or args.test_episodes < 1:
        raise UsageError("--episodes, --val-episodes and --test-episodes must be >= 1")
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    out_dir = Path(args.out_dir)
    noise = simulator.NoiseConfig(sigma_a=args.sigma_a, sigma_b=args.sigma_b)
    counts = {"train": args.episodes, "val": args.val_episodes, "test": args.test_episodes}
    config = {
        "seed": args.seed,
        "frames": args.frames,
        "profile": args.profile,
        "d_a": args.d_a,
        "window": args.window,
        "sigma_a": args.sigma_a,
        "sigma_b": args.sigma_b,
    }
    manifest = {"seed": args.seed, "config": config, "splits": {}}
    start = 0
    all_ids = set()
    for name, count in counts.items():
        episodes = simulator.generate_dataset(
            args.seed,
            count,
            length=args.frames,
            motion_profile=args.profile,
            noise=noise,
            d_a=args.d_a,
            window=args.window,
            start_index=start,
        )
        start += count
        ids = [ep.seed for ep in episodes]
        if all_ids.intersection(ids):
            raise RuntimeError("episode id collision across splits")
        all_ids.update(ids)
        digest = simulator.write_dataset(
            out_dir / f"{name}.jsonl", episodes, {**config, "split": name}
        )
        manifest["splits"][name] = {
            "file": f"{name}.jsonl",
            "episodes": count,
            "episode_ids": ids,
            "digest": digest,
        }
        _say(args, f"wrote {name}.jsonl: {count} episodes ({digest[:12]})")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _say(args, f"manifest.json written to {out_dir}")
    return 0


def _cmd_degrade(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    if args.spec == "none":
        spec = deg.DegradationSpec(seed=args.seed)
    else:
        spec = deg.SPEC_PRESETS[args.spec](seed=args.seed)
    overrides = {
        name: getattr(args, name)
        for name in (
            "occlusion_prob",
            "blur_prob",
            "frame_drop_prob",
            "imu_noise_prob",
            "imu_drop_prob",
            "spatial_prob",
            "temporal_prob",
        )
        if getattr(args, name) is not None
    }
    if overrides:
        spec = replace(spec, **overrides)
    targets = [s.strip() for s in args.splits.split(",") if s.strip()]
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        src = in_dir / f"{name}.jsonl"
        if not src.exists():
            raise harness.DatasetMissing(f"dataset file not found: {src}")
        header, episodes = simulator.read_dataset(src)
        if name in targets:
            episodes = [deg.apply_degradations(ep, spec) for ep in episodes]
            note = "degraded"
        else:
            note = "copied"
        config = dict(header.get("config", {}))
        config["degradation"] = {
            "spec": args.spec,
            "seed": args.seed,
            "applied": name in targets,
            **{k: v for k, v in overrides.items()},
        }
        digest = simulator.write_dataset(out_dir / f"{name}.jsonl", episodes, config)
        _say(args, f"{note} {name}.jsonl ({digest[:12]})")
    manifest_src = in_dir / "manifest.json"
    if manifest_src.exists():
        manifest = json.loads(manifest_src.read_text(encoding="utf-8"))
        manifest["degradation"] = {"spec": args.spec, "seed": args.seed, **overrides}
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def _cmd_train(args) -> int:
    config = harness.load_config(args.config)
    if args.data_dir is not None:
        config = replace(config, data_dir=args.data_dir)
    if args.fusion is not None:
        config = replace(config, fusion=args.fusion)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.train_seed is not None:
        config = replace(config, seed=args.train_seed)
    log = None if args.quiet else (lambda msg: print(msg))
    result, eval_result = harness.run_experiment(config, args.out_dir, log=log, eval_seed=args.seed)
    _say(
        args,
        f"test t_rmse={eval_result.t_rmse:.6f} m r_rmse={eval_result.r_rmse:.6f} deg "
        f"(best epoch {result.best_epoch})",
    )
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint

    store, meta = load_checkpoint(args.checkpoint)
    if "config" not in meta:
        raise harness.DimensionMismatch("checkpoint carries no configuration metadata")
    config = harness.config_from_dict(meta["config"])
    header, episodes = simulator.read_dataset(args.data)
    d_a, window = harness._dataset_dims(header)
    model = harness.build_model(config, d_a, window)
    result = harness.evaluate(model, store, episodes, config, eval_seed=args.eval_seed)
    out_dir = Path(args.out_dir)
    metric_rows = [
        {"phase": "test", "epoch": "", "metric": key, "value": value}
        for key, value in result.metric_items()
    ]
    reporting.write_csv(out_dir / "metrics.csv", ["phase", "epoch", "metric", "value"], metric_rows)
    reporting.write_csv(
        out_dir / "masks.csv", ["episode", "frame", "modality", "rate"], result.mask_rows
    )
    if result.prediction_rows:
        reporting.write_csv(
            out_dir / "predictions.csv",
            list(result.prediction_rows[0].keys()),
            result.prediction_rows,
        )
    if result.mask_rows:
        rows = harness.mask_report(result.mask_rows, episodes)
        reporting.write_csv(
            out_dir / "mask_report.csv", ["table", "bucket", "modality", "rate_mean", "n"], rows
        )
    _say(args, f"t_rmse={result.t_rmse:.6f} m r_rmse={result.r_rmse:.6f} deg")
    return 0


def _cmd_report(args) -> int:
    warnings: list = []
    written = reporting.generate_report(args.run_dir, args.out_dir, warn=warnings.append)
    for message in warnings:
        print(f"warning: {message}", file=sys.stderr)
    _say(args, f"wrote {len(written)} report files to {args.out_dir}")
    return 0


class UsageError(ValueError):
    pass


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


_HANDLERS = {
    "simulate": _cmd_simulate,
    "degrade": _cmd_degrade,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (
        harness.DatasetMissing,
        harness.InvalidConfig,
        harness.DimensionMismatch,
        harness.DivergedLoss,
        harness.JoinMismatch,
        reporting.MissingArtifacts,
        FileNotFoundError,
        ValueError,
        RuntimeError,
    ) as err:
        print(f"error: {err.__class__.__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
