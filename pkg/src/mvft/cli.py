"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config_file, make_config
from .data import (DataError, SynthSpec, SynthSpecError, WindowSet, default_synth_spec, generate_synthetic,
                   load_windows, make_split, save_windows, windows_from_raw)
from .model import ModelConfigError
from .pipeline import format_grid, prepare_experiment, run_ablation, run_training
from .report import SCHEMA_VERSION, write_report
from .training import evaluate, restore_model
from .views import Normalizer, WindowError, build_batch, dft_magnitude

log = logging.getLogger("mvft")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- argument parsing


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or a run report, whose config is reused) "
                                    "(default: built-in defaults)")
    p.add_argument("--data", required=True, help="window dataset (.npz) from gen-synth or prepare")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="seed for split, init and shuffling (default: 0)")
    p.add_argument("--views", help="subset of t,f,s (default: t,f,s)")
    p.add_argument("--model", choices=["mvft", "baseline"], help="model kind (default: mvft)")
    p.add_argument("--fusion-mode", choices=["cyclic", "concat_kv"], help="fusion wiring (default: cyclic)")
    p.add_argument("--epochs", type=int, help="maximum epochs (default: 50)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default: 32)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-4)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default: 20)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvft", description="Multi-view fusion transformer for sensor HAR.")
    parser.add_argument("--version", action="version", version=f"mvft {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled window dataset")
    p.add_argument("--spec", help="synthetic spec JSON (default: built-in 3-class recipe)")
    p.add_argument("--out", required=True, help="output dataset path (.npz)")
    p.add_argument("--seed", type=int, help="override the recipe seed (default: the recipe file value, or 0)")
    p.add_argument("--classes", type=int, default=3, help="classes for the built-in recipe (default: 3)")
    p.add_argument("--per-class", type=int, default=500, help="windows per class, built-in recipe (default: 500)")
    p.add_argument("--length", type=int, default=30, help="window length T, built-in recipe (default: 30)")
    p.add_argument("--noise", type=float, default=1.0, help="noise std, built-in recipe (default: 1.0)")

    p = sub.add_parser("prepare", help="window a raw WISDM-format accelerometer file")
    p.add_argument("--raw", required=True, help="raw text file of user,activity,timestamp,x,y,z; lines")
    p.add_argument("--out", required=True, help="output dataset path (.npz)")
    p.add_argument("--length", type=int, default=30, help="window length T (default: 30)")
    p.add_argument("--stride", type=int, help="window stride (default: window length)")

    p = sub.add_parser("train", help="train one model and write report, checkpoint and history")
    _train_flags(p)

    p = sub.add_parser("ablate", help="run the 11-cell view-subset grid (7 baseline + 4 MVFT)")
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--data", required=True, help="window dataset (.npz)")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test",
                   help="which split to score, recomputed from the checkpoint config (default: test)")
    p.add_argument("--out", help="directory for report.json (default: print only)")

    p = sub.add_parser("inspect", help="summarize a dataset; optionally emit spectra as TSV")
    p.add_argument("--data", required=True, help="window dataset (.npz)")
    p.add_argument("--series", help="write (class, window, channel, bin, magnitude) TSV here (default: none)")
    return parser


# ---------------------------------------------------------------- helpers


def _load_data(path) -> WindowSet:
    try:
        return load_windows(path)
    except DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from None


def _resolve_config(args) -> TrainConfig:
    file_values = {}
    if args.config:
        file_values = load_config_file(args.config)
        if file_values.get("schema_version") == SCHEMA_VERSION and "config" in file_values:
            file_values = file_values["config"]
    return make_config(file_values, {"seed": args.seed, "views": args.views, "model": args.model,
                                     "fusion_mode": args.fusion_mode, "max_epochs": args.epochs,
                                     "batch_size": args.batch_size, "lr": args.lr, "patience": args.patience})


def _dataset_entry(path, ws: WindowSet) -> dict:
    return {"path": str(path), "sha256": ws.content_hash(), "n_windows": len(ws),
            "label_names": ws.label_names}


def _split_entry(split) -> dict:
    return {"policy": split.policy, "seed": split.seed, "ratios": split.ratios, "sizes": split.sizes()}


def _base_report(command: str, args, config: TrainConfig, ws: WindowSet, split, out: Path) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "command_line": ["mvft", command, "--config", str(out / "report.json"), "--data", str(args.data),
                         "--out", str(out)],
        "argv": list(sys.argv[1:]) if args.argv is None else list(args.argv),
        "config": config.to_dict(),
        "dataset": _dataset_entry(args.data, ws),
        "split": _split_entry(split),
    }


def _prepare(args):
    config = _resolve_config(args)
    ws = _load_data(args.data)
    if len(ws) == 0:
        raise CliError(f"{args.data}: dataset has 0 windows", EXIT_DATA)
    try:
        exp = prepare_experiment(ws, config)
    except (DataError, WindowError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    config.time_quantum = exp.time_quantum
    config.model_config(ws.n_channels, ws.seq_len, ws.n_class, exp.time_quantum)  # validates dims early
    return config, ws, exp


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    try:
        if args.spec:
            spec = SynthSpec.from_dict(load_config_file(args.spec))
        else:
            spec = default_synth_spec(args.classes, args.per_class, args.length, seed=0, noise_std=args.noise)
        if args.seed is not None:
            spec.seed = args.seed
        ws = generate_synthetic(spec)
    except (SynthSpecError, ConfigError, WindowError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    save_windows(args.out, ws)
    print(f"wrote {len(ws)} windows ({ws.n_class} classes, T={ws.seq_len}, C={ws.n_channels}) to {args.out}")
    print(f"sha256 {ws.content_hash()}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    if not Path(args.raw).is_file():
        raise CliError(f"raw file not found: {args.raw}", EXIT_DATA)
    try:
        ws, errors = windows_from_raw(args.raw, args.length, args.stride)
    except (DataError, WindowError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    for err in errors[:10]:
        log.warning("%s", err)
    save_windows(args.out, ws)
    print(f"parsed {ws.meta['records']} records, {len(errors)} malformed lines, "
          f"{ws.meta['duplicates_dropped']} duplicates dropped")
    print(f"wrote {len(ws)} windows, classes {ws.label_names}, to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, ws, exp = _prepare(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with open(out / "history.jsonl", "w", encoding="utf-8") as hist:
        result = run_training(exp, config,
                              on_epoch=lambda r: hist.write(json.dumps(r, sort_keys=True) + "\n"))
    save_checkpoint(out / "checkpoint.mvft", result.checkpoint)
    report = _base_report("train", args, config, ws, exp.split, out)
    report.update(metrics={k: m.to_dict() for k, m in result.metrics.items()}, history=result.history,
                  best_epoch=result.checkpoint.epoch, wall_clock_seconds=time.perf_counter() - start)
    write_report(out / "report.json", report)
    test = result.metrics.get("test")
    print(f"best epoch {result.checkpoint.epoch}, val acc {result.checkpoint.best_val_accuracy:.4f}"
          + (f", test acc {test.accuracy:.4f}" if test else ""))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config, ws, exp = _prepare(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows = run_ablation(exp, config, on_cell=lambda r: log.info("cell %s", r))
    report = _base_report("ablate", args, config, ws, exp.split, out)
    report.update(metrics={}, ablation=rows, wall_clock_seconds=time.perf_counter() - start)
    write_report(out / "report.json", report)
    grid = format_grid(rows)
    (out / "grid.txt").write_text(grid + "\n", encoding="utf-8")
    print(grid)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    ws = _load_data(args.data)
    config = make_config(ckpt.config["train"])
    model = restore_model(ckpt)
    if (ws.seq_len, ws.n_channels, ws.n_class) != (model.config.seq_len, model.config.n_channels,
                                                    model.config.n_class):
        raise CliError("dataset shape does not match the checkpoint's model", EXIT_DATA)
    norm = Normalizer(**ckpt.normalizer)
    views = norm.apply(build_batch(ws.windows()))
    split = make_split(ws.labels, ws.users, config.split_policy, config.split_ratios, config.seed)
    chosen = {"train": split.train, "val": split.val, "test": split.test,
              "all": list(range(len(ws)))}[args.split]
    if not chosen:
        raise CliError(f"split {args.split!r} is empty", EXIT_DATA)
    metrics = evaluate(model, views.subset(chosen))
    print(f"{args.split}: accuracy {metrics.accuracy:.4f}, loss {metrics.loss:.4f} on {len(chosen)} windows")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"schema_version": SCHEMA_VERSION, "command": "eval",
                  "command_line": ["mvft", "eval", "--checkpoint", str(args.checkpoint), "--data",
                                   str(args.data), "--split", args.split, "--out", str(out)],
                  "config": config.to_dict(), "dataset": _dataset_entry(args.data, ws),
                  "split": _split_entry(split), "metrics": {args.split: metrics.to_dict()},
                  "wall_clock_seconds": 0.0}
        write_report(out / "report.json", report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    ws = _load_data(args.data)
    n = len(ws)
    print(f"{n} windows")
    if n == 0:
        return EXIT_OK
    print(f"T={ws.seq_len} C={ws.n_channels} classes={ws.n_class} users={len(np.unique(ws.users))}")
    counts = np.bincount(ws.labels, minlength=ws.n_class)
    print("class histogram:")
    for name, c in zip(ws.label_names, counts):
        print(f"  {name:<20} {c}")
    flat = ws.samples.reshape(-1, ws.n_channels)
    print("per-channel stats (mean, std, min, max):")
    for c in range(ws.n_channels):
        col = flat[:, c]
        print(f"  ch{c}: {col.mean():.4f} {col.std():.4f} {col.min():.4f} {col.max():.4f}")
    series = []
    print("sample spectra (first window per class, channel 0, strongest non-DC bin):")
    for k, name in enumerate(ws.label_names):
        idx = np.flatnonzero(ws.labels == k)
        if not idx.size:
            continue
        mags = dft_magnitude(ws.samples[idx[0]])
        peak = 1 + int(np.argmax(mags[1:, 0])) if mags.shape[0] > 1 else 0
        print(f"  {name:<20} window {idx[0]}: bin {peak} magnitude {mags[peak, 0]:.4f}")
        for c in range(ws.n_channels):
            for b in range(mags.shape[0]):
                series.append(f"{name}\t{idx[0]}\t{c}\t{b}\t{mags[b, c]:.10g}")
    if args.series:
        Path(args.series).write_text("class\twindow\tchannel\tbin\tmagnitude\n" + "\n".join(series) + "\n",
                                     encoding="utf-8")
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "prepare": cmd_prepare, "train": cmd_train, "ablate": cmd_ablate,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WindowError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
