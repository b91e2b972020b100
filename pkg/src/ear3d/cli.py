"""Command-line entry point: ``ear3d <subcommand> [flags]``.

Exit codes: 0 success, 1 verification or evaluation failure, 2 configuration
error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import PhantomSpec, RecordStore, generate_phantom, load_record, save_dataset, write_mask
from .errors import ConfigError, DataError, ShapeError
from .objectives import binarize, compute_metrics
from .training import (RunConfig, cmd_ablation, cmd_train, deterministic_mode, load_checkpoint,
                       metrics_summary, predict_probs)
from .velocity import global_velocity_curves, postprocess_mask, velocity_report

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("ear3d")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output:
        cfg.output_dir = args.output
    if args.deterministic:
        cfg.deterministic = True
    return cfg.validate()


def do_train(args) -> int:
    cfg = _run_config(args)
    summary = cmd_train(cfg, resume=args.checkpoint)
    folds = ", ".join(f"fold {f['fold']}: {f['best_val_dice']:.4f}" for f in summary["folds"])
    print(f"best validation Dice per fold: {folds}")
    if "test" in summary:
        agg = summary["test"]["aggregate"]["dice"]
        print(f"test Dice (subject level): {agg['mean']:.4f} ± {agg['sd']:.4f}")
    return EXIT_OK


def do_ablation(args) -> int:
    cfg = _run_config(args)
    cmd_ablation(cfg)
    print((Path(cfg.output_dir) / "ablation.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    net, _, _ = load_checkpoint(args.checkpoint)
    return net


def _check_fits(net, rec):
    try:
        net.output_shape((1, 4) + rec.image.shape[1:])
    except ShapeError as exc:
        raise ConfigError(f"{rec.name}: {exc}") from None


def eval_records(store: RecordStore, indices, predict) -> dict:
    """Score ``predict(rec) -> binary mask`` against each record's mask."""
    rows = []
    for idx in indices:
        rec = store.get(idx)
        rows.append({"subject_id": rec.subject_id, "slice_id": rec.slice_id,
                     "metrics": compute_metrics(predict(rec), rec.mask)})
    return metrics_summary(rows)


def do_eval(args) -> int:
    if not args.data:
        raise ConfigError("--data (manifest) is required")
    store = RecordStore.open(args.data)
    subjects = args.subjects.split(",") if args.subjects else store.manifest.subjects
    indices = store.indices_for(subjects)
    if args.identity:
        predict = lambda rec: rec.mask
    else:
        net = _model(args)

        def predict(rec):
            _check_fits(net, rec)
            return binarize(predict_probs(net, rec))[0]

    with deterministic_mode(args.deterministic):
        report = eval_records(store, indices, predict)
    out = Path(args.output or ".") / "eval.json"
    _write_json(out, report)
    agg = report["aggregate"]
    for name in ("dice", "sensitivity", "ppv"):
        m = agg[name]
        value = "undefined" if m["mean"] is None else f"{m['mean']:.4f} ± {m['sd']:.4f}"
        print(f"{name}: {value} over {m['groups']} subjects")
    if args.min_dice is not None:
        dice = agg["dice"]["mean"]
        if dice is None or dice < args.min_dice:
            print(f"FAIL: Dice below {args.min_dice}")
            return EXIT_FAIL
    return EXIT_OK


def _write_velocity(rec, mask, out: Path):
    curves = global_velocity_curves(rec, mask)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(curves.to_csv(), encoding="utf-8")
    (out / "peaks.json").write_text(velocity_report(curves), encoding="utf-8")
    return curves


def do_predict(args) -> int:
    if not args.record:
        raise ConfigError("--record is required")
    net = _model(args)
    rec = load_record(args.record)
    _check_fits(net, rec)
    with deterministic_mode(args.deterministic):
        mask = postprocess_mask(binarize(predict_probs(net, rec))[0])
    out = Path(args.output or "prediction")
    out.mkdir(parents=True, exist_ok=True)
    write_mask(mask, out / "mask.raw")
    _write_json(out / "prediction.json", {
        "source": str(args.record), "checkpoint": str(args.checkpoint),
        "dims": [int(d) for d in mask.shape], "dtype": "u8",
        "metrics_vs_record_mask": compute_metrics(mask, rec.mask).to_dict(),
    })
    if args.velocity:
        _write_velocity(rec, mask, out)
    print(f"wrote {out / 'mask.raw'}")
    return EXIT_OK


def do_velocity(args) -> int:
    if not args.record:
        raise ConfigError("--record is required")
    rec = load_record(args.record)
    if args.mask:
        raw = np.fromfile(args.mask, dtype=np.uint8)
        if raw.size != rec.mask.size:
            raise DataError(f"{args.mask}: {raw.size} bytes, record needs {rec.mask.size}")
        mask = raw.reshape(rec.mask.shape)
    else:
        mask = rec.mask
    curves = _write_velocity(rec, mask, Path(args.output or "velocity"))
    print(curves.to_csv(), end="")
    return EXIT_OK


def do_verify(args) -> int:
    from .verify import main as verify_main
    with deterministic_mode(True):
        results, text = verify_main(seed=args.seed or 0, corrupt_conv=args.corrupt_conv)
    print(text, end="")
    if args.output:
        Path(args.output).mkdir(parents=True, exist_ok=True)
        (Path(args.output) / "verify.txt").write_text(text, encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def do_phantom(args) -> int:
    spec = PhantomSpec(sigma_n=args.noise, magnitude_noise=args.magnitude_noise,
                       records_per_subject=args.records_per_subject)
    h, w = args.size
    records = generate_phantom(args.records, args.frames, h, w, seed=args.seed or 0, spec=spec)
    out = Path(args.output or "phantom")
    save_dataset(records, out)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    common.add_argument("--output", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint file (train: resume from it or a run dir)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="ear3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train with subject-level split and k folds")
    sub.add_parser("ablation", parents=[common], help="architecture x loss grid")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--data", help="dataset directory or manifest.json")
    p.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--identity", action="store_true", help="score ground truth against itself")
    p.add_argument("--min-dice", type=float, help="exit 1 when the aggregate Dice is lower")
    p = sub.add_parser("predict", parents=[common], help="segment one record")
    p.add_argument("--record", help="record directory")
    p.add_argument("--velocity", action="store_true", help="also write velocity curves and peaks")
    p = sub.add_parser("velocity", parents=[common], help="velocity curves from a record and mask")
    p.add_argument("--record", help="record directory")
    p.add_argument("--mask", help="mask.raw to use instead of the record's own mask")
    p = sub.add_parser("verify", parents=[common], help="gradient, oracle and invariant checks")
    p.add_argument("--corrupt-conv", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    p.add_argument("--records", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--noise", type=float, default=0.5, help="velocity noise sd (cm/s)")
    p.add_argument("--magnitude-noise", type=float, default=0.1)
    p.add_argument("--records-per-subject", type=int, default=1)
    return parser


COMMANDS = {"train": do_train, "ablation": do_ablation, "eval": do_eval, "predict": do_predict,
            "velocity": do_velocity, "verify": do_verify, "phantom": do_phantom}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
