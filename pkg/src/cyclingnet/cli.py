"""Command-line entry point: ``cyclingnet <command> [options]``.

Commands: synth, flow, fuse, train, eval, predict, summary, selftest.
Settings come from defaults, then ``--config FILE``, then ``--set key=value``
and the dedicated flags; the resolved config is written to the output
directory as ``resolved_config.toml``.

Exit codes: 0 success, 2 configuration error, 3 data error (manifest, frames,
flow cache, weight files), 4 failed check (golden table, selftest),
5 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, resolve
from .imaging import FRAME_SUFFIXES, read_image, write_image
from .network import (WeightFormatError, WeightMismatchError, build_model, golden_diff,
                      load_weights, save_weights, summary)
from .pipeline import (DatasetError, FlowCache, FlowFormatError, ManifestError, SampleSource,
                       build_dataset, compute_clip_flows, corpus_stats, load_manifest, resize_frame)
from .trainer import (TrainingError, evaluate, predict_clip, predicted_intervals, threshold_sweep,
                      train, write_history, write_predictions, write_sweep)

log = logging.getLogger("cyclingnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECK = 4
EXIT_TRAINING = 5

DATA_ERRORS = (ManifestError, DatasetError, FlowFormatError, WeightFormatError,
               WeightMismatchError, OSError)


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _run_config(args) -> RunConfig:
    overrides = list(args.overrides or [])
    if getattr(args, "threshold", None) is not None:
        overrides.append(f"train.threshold={args.threshold}")
    for flag, key in (("manifest", "paths.manifest"), ("cache", "paths.flow_cache"),
                      ("weights", "paths.weights"), ("out", "paths.output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f'{key}="{Path(value).as_posix()}"')
    emit = getattr(args, "emit_color", None)
    if emit:
        overrides.append(f'paths.flow_colors="{Path(emit).as_posix()}"')
    config = resolve(args.config, overrides, args.seed)
    if emit == "":
        target = Path(config.paths.output_dir) / "flow_color"
        config = resolve(args.config, overrides + [f'paths.flow_colors="{target.as_posix()}"'], args.seed)
    return config


def _echo(config: RunConfig) -> Path:
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = config.dump(out / "resolved_config.toml")
    log.info("resolved config written to %s", path)
    return path


def _cache(config: RunConfig) -> FlowCache:
    return FlowCache(Path(config.paths.flow_cache), config.flow, config.frame_size)


def _dataset(config: RunConfig, clips):
    return build_dataset(clips, _cache(config), config.data.split_policy, config.train.batch_size,
                         config.train.seed, config.data.augment, config.data.val_fraction,
                         config.data.test_fraction)


def _trained_model(config: RunConfig):
    model = build_model(config.model)
    load_weights(model, config.paths.weights)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, config: RunConfig) -> int:
    from .synthetic import generate_corpus

    root = Path(args.out or "synthetic")
    h, w = args.size
    manifest = generate_corpus(root, args.clips, args.frames, (h, w), config.train.seed,
                               args.val_clips, args.test_clips)
    demo = resolve(overrides=[
        f"data.frame_height={h}", f"data.frame_width={w}", "data.augment=[]",
        "model.conv_filters=[4,4,6,6,8]", "model.conv_kernels=[3,3,2,2,3]",
        "model.conv_strides=[1,1,1,1,1]", "model.lstm_hidden=6", "model.attention_units=4",
        "model.dense_widths=[8,4]", "train.max_epochs=200", "train.early_stop_patience=199",
        "train.batch_size=8", f"train.monitor=\"{'val_loss' if args.val_clips else 'train_loss'}\"",
        f'paths.manifest="{manifest.resolve().as_posix()}"',
        f'paths.flow_cache="{(root / "flow_cache").resolve().as_posix()}"',
        f'paths.weights="{(root / "runs" / "weights.cynw").resolve().as_posix()}"',
        f'paths.output_dir="{(root / "runs").resolve().as_posix()}"',
    ], seed=config.train.seed)
    config_path = demo.dump(root / "config.toml")
    print(f"manifest\t{manifest}")
    print(f"config\t{config_path}")
    return EXIT_OK


def cmd_flow(args, config: RunConfig) -> int:
    clips = load_manifest(config.paths.manifest, check_files=False)
    cache = _cache(config)
    colors = Path(config.paths.flow_colors) if config.paths.flow_colors else None
    failures = 0
    print("clip_id\tframes\tflows\tcomputed\tstatus")
    for clip in clips:
        try:
            computed = compute_clip_flows(clip, cache, colors, force=args.force)
        except (ManifestError, OSError, ValueError) as exc:
            failures += 1
            print(f"{clip.clip_id}\t{clip.frame_count}\t-\t-\terror: {exc}")
            continue
        print(f"{clip.clip_id}\t{clip.frame_count}\t{max(clip.frame_count - 1, 0)}\t{computed}\tok")
    print(f"cache\t{cache.directory}")
    if failures:
        log.error("%d of %d clips failed", failures, len(clips))
        return EXIT_DATA
    return EXIT_OK


def cmd_fuse(args, config: RunConfig) -> int:
    clips = load_manifest(config.paths.manifest)
    wanted = [c for c in clips if args.clip_id is None or c.clip_id == args.clip_id]
    if not wanted:
        raise ManifestError(f"clip {args.clip_id!r} is not in the manifest")
    source = SampleSource(clips, _cache(config))
    out = Path(config.paths.output_dir) / "fused"
    written = 0
    for clip in wanted:
        for index in list(clip.usable_indices())[:args.limit]:
            sample = source.sample(clip.clip_id, index)
            target = out / clip.clip_id / f"{index:06d}.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(target, sample.x)
            written += 1
    print(f"fused\t{written}\t{out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    from .plotting import plot_history

    clips = load_manifest(config.paths.manifest)
    stats = corpus_stats(clips)
    log.info("corpus: %(clips)d clips, %(frames)d frames, %(positives)d near-miss frames", stats)
    dataset = _dataset(config, clips)
    model = build_model(config.model)
    state = train(model, dataset, config.train)
    out = Path(config.paths.output_dir)
    weights = Path(config.paths.weights)
    weights.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, weights)
    write_history(out / "history.csv", state.history)
    plot_history(state.history, out / "history.png")
    print(f"epochs\t{state.epoch}")
    print(f"best_epoch\t{state.best_epoch}")
    print(f"stopped_early\t{str(state.stopped_early).lower()}")
    print(f"best_train_acc\t{max(r.train_acc for r in state.history):.6f}")
    print(f"weights\t{weights}")
    if dataset.split.val:
        report, _ = evaluate(model, dataset, "val", config.train.threshold, config.train.batch_size)
        (out / "metrics_val.txt").write_text(report.format() + "\n")
        print(report.format())
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    from .plotting import plot_predictions, plot_sweep

    clips = load_manifest(config.paths.manifest)
    dataset = _dataset(config, clips)
    if not dataset.split[args.split]:
        raise DatasetError(f"the {args.split} split is empty")
    model = _trained_model(config)
    report, records = evaluate(model, dataset, args.split, config.train.threshold,
                               config.train.batch_size)
    out = Path(config.paths.output_dir)
    (out / "metrics.txt").write_text(report.format() + "\n")
    write_predictions(out / "predictions.csv", records)
    plot_predictions(records, out / "predictions.png", config.train.threshold)
    print(report.format())
    if args.sweep:
        probs = np.array([r.probability for r in records])
        labels = np.array([r.label for r in records])
        sweep = threshold_sweep(probs, labels)
        write_sweep(out / "sweep.csv", sweep)
        plot_sweep(sweep, out / "sweep.png")
        print(f"sweep\t{out / 'sweep.csv'}")
    return EXIT_OK


def read_clip_frames(directory: Path, frame_size) -> list[np.ndarray]:
    """Frames of a bare clip directory, ordered by their integer file stems."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"clip directory {directory} does not exist")
    files = sorted((p for p in directory.iterdir()
                    if p.suffix.lower() in FRAME_SUFFIXES and p.stem.isdigit()),
                   key=lambda p: int(p.stem))
    return [resize_frame(read_image(p), *frame_size) for p in files]


def cmd_predict(args, config: RunConfig) -> int:
    from .plotting import plot_predictions

    clip_dir = Path(args.clip)
    frames = read_clip_frames(clip_dir, config.frame_size)
    model = _trained_model(config)
    clip_id = args.clip_id or clip_dir.name
    records = predict_clip(model, frames, config.train.threshold, clip_id, config.flow,
                           config.train.batch_size)
    out = Path(config.paths.output_dir)
    write_predictions(out / "predictions.csv", records)
    plot_predictions(records, out / "predictions.png", config.train.threshold)
    intervals = predicted_intervals(records)
    spans = ",".join(f"{a}-{b}" for a, b in intervals) or "none"
    print(f"intervals\t{clip_id}\t{len(intervals)}\t{spans}")
    print(f"predictions\t{len(records)}\t{out / 'predictions.csv'}")
    return EXIT_OK


def cmd_summary(args, config: RunConfig) -> int:
    model = build_model(config.model)
    print(summary(model))
    if args.golden:
        diffs = golden_diff(model)
        if diffs:
            print("golden\tFAIL")
            for line in diffs:
                print(f"diff\t{line}")
            raise CheckFailed(f"{len(diffs)} differences from the reference layer table")
        print("golden\tPASS")
    return EXIT_OK


def cmd_selftest(args, config: RunConfig) -> int:
    from .selftest import run_selftest

    results = run_selftest(perturb=args.perturb_grad, model_seeds=args.seeds, layer_seeds=args.seeds)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    print(f"selftest\t{'FAIL' if failed else 'PASS'}\t{len(results) - len(failed)}/{len(results)}")
    if failed:
        raise CheckFailed("failing checks: " + ", ".join(failed))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "flow": cmd_flow, "fuse": cmd_fuse, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "summary": cmd_summary, "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file of section.key settings")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one setting, e.g. --set flow.window_size=9 (repeatable)")
    common.add_argument("--seed", type=int, help="seed for weights, shuffling and augmentation")
    common.add_argument("--threads", type=int, default=1,
                        help="cap on BLAS/OpenMP worker threads; 1 is fully deterministic (default)")
    common.add_argument("--out", help="output directory (paths.output_dir)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", help="clip manifest (paths.manifest)")
    data.add_argument("--cache", help="flow cache root (paths.flow_cache)")

    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--weights", help="weight file (paths.weights)")
    weights.add_argument("--threshold", type=float, help="decision threshold (train.threshold)")

    parser = argparse.ArgumentParser(prog="cyclingnet", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic demo corpus and config")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--val-clips", type=int, default=2)
    p.add_argument("--test-clips", type=int, default=2)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, nargs=2, default=(24, 32), metavar=("H", "W"))

    p = sub.add_parser("flow", parents=[common, data], help="compute and cache optical flow")
    p.add_argument("--emit-color", nargs="?", const="", default=None, metavar="DIR",
                   help="also write colorized flows (default DIR: <out>/flow_color)")
    p.add_argument("--force", action="store_true", help="recompute cached entries")

    p = sub.add_parser("fuse", parents=[common, data], help="write fused composites as images")
    p.add_argument("--clip-id", help="only this clip")
    p.add_argument("--limit", type=int, default=None, help="at most this many frames per clip")

    sub.add_parser("train", parents=[common, data, weights], help="train and save weights")

    p = sub.add_parser("eval", parents=[common, data, weights], help="metrics on one split")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--sweep", action="store_true", help="also sweep thresholds 0.05..0.95")

    p = sub.add_parser("predict", parents=[common, weights], help="per-frame predictions for a clip")
    p.add_argument("--clip", required=True, help="directory of frames named by index")
    p.add_argument("--clip-id", help="identifier written to the output (default: directory name)")

    p = sub.add_parser("summary", parents=[common], help="layer table and parameter totals")
    p.add_argument("--golden", action="store_true", help="fail unless the reference layer table matches")

    p = sub.add_parser("selftest", parents=[common], help="gradient, table, flow and fusion checks")
    p.add_argument("--seeds", type=int, default=20, help="random draws per gradient check")
    p.add_argument("--perturb-grad", metavar="OP", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        config = _run_config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        _echo(config)
        limits = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
        with limits:
            return COMMANDS[args.command](args, config)
    except CheckFailed as exc:
        log.error("%s", exc)
        return EXIT_CHECK
    except TrainingError as exc:
        log.error("training failed: %s", exc)
        return EXIT_TRAINING
    except DATA_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
