"""Command-line entry point: ``margincal <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .calibration import CalibConfig, CalibrationError, ClassStats, class_stats, compute_offsets, format_offsets
from .core import FormatError, ShapeError, load_manifest, load_mask, load_scores
from .experiments import (
    DEFAULT_NOISE_SIGMA,
    DEFAULT_SPLITS,
    ExperimentSpec,
    LossSetting,
    default_synth,
    header,
    load_dataset,
    run_bound,
    run_compare,
    run_gap,
)
from .losses import LOSS_NAMES, BaselineParams
from .metrics import ConfusionMatrix, accumulate, report
from .synth import InfeasibleSpecError, SynthSpec, generate, split, write_dataset
from .trainer import TrainConfig, TrainingAbort, evaluate, load_model, save_model, train

log = logging.getLogger("margincal")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output file or directory")
    common.add_argument("--classes", type=int, help="class count (default: from the mask headers)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path, help="scores/features<TAB>mask manifest (training split)")
    data.add_argument("--val-manifest", type=Path)
    data.add_argument("--test-manifest", type=Path)
    data.add_argument("--synth-spec", type=Path, help="JSON synthetic dataset spec")
    data.add_argument("--noise-sigma", type=float, default=None,
                      help=f"noise of the default synthetic task (default {DEFAULT_NOISE_SIGMA})")
    data.add_argument("--split", type=_int_list, default=list(DEFAULT_SPLITS),
                      help="train,val,test image counts for synthetic data")

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument("--tau", type=float, default=10.0)
    calib.add_argument("--upsilon", type=float, default=1.0)

    loss = argparse.ArgumentParser(add_help=False)
    loss.add_argument("--loss", action="append", choices=LOSS_NAMES,
                      help="loss to train with; repeat for comparisons (default ce)")
    loss.add_argument("--gamma", type=float, default=2.0, help="focal exponent")
    loss.add_argument("--alpha", type=float, default=0.3, help="Tversky false-positive weight")
    loss.add_argument("--beta", type=float, default=0.7, help="Tversky false-negative weight")
    loss.add_argument("--mix", type=float, default=0.5, help="weight of mc in mc+dice / mc+tversky")
    loss.add_argument("--lr", type=float, default=1e-4)
    loss.add_argument("--weight-decay", type=float, default=1e-2)
    loss.add_argument("--epochs", type=int, default=100)
    loss.add_argument("--warmup-epochs", type=int, default=None,
                      help="cross-entropy warm-up epochs (default 20%% of --epochs)")
    loss.add_argument("--batch-images", type=int, default=1)
    loss.add_argument("--model", choices=("linear", "mlp1"), default="linear")
    loss.add_argument("--hidden", type=int, default=16)
    loss.add_argument("--seeds", type=_int_list, default=[0])

    bound = argparse.ArgumentParser(add_help=False)
    bound.add_argument("--F", type=float, default=1.0, dest="F",
                       help="complexity proxy plus confidence term")
    bound.add_argument("--eta", type=float, default=0.05)
    bound.add_argument("--trials", type=int, default=200)

    stats_src = argparse.ArgumentParser(add_help=False)
    stats_src.add_argument("--stats", type=Path, help="class statistics CSV written by 'stats'")

    p = argparse.ArgumentParser(
        prog="margincal",
        description="Margin-calibrated segmentation losses: calibration, training, evaluation and bound audits.",
        epilog="Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[common, data], help="per-class pixel counts of a manifest")
    sub.add_parser("calibrate", parents=[common, data, calib, stats_src], help="compute margin offsets")
    sub.add_parser("synth", parents=[common, data], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common, data, calib, loss], help="train one model")
    ev = sub.add_parser("eval", parents=[common, data], help="metrics of scores or a trained model")
    ev.add_argument("--model-file", type=Path, help="MDL1 checkpoint; manifest then lists features")
    sub.add_parser("compare", parents=[common, data, calib, loss], help="loss comparison over seeds")
    sub.add_parser("gap", parents=[common, data, calib, loss], help="train/val loss gap study")
    sub.add_parser("bound", parents=[common, data, calib, bound, stats_src], help="error bound audit")
    return p


# --- helpers ---------------------------------------------------------------------


def _synth_spec(args) -> SynthSpec:
    if args.synth_spec is not None:
        spec = SynthSpec.from_json(args.synth_spec)
    else:
        spec = default_synth()
    if args.noise_sigma is not None:
        spec = dataclasses.replace(spec, noise_sigma=args.noise_sigma)
    if len(args.split) != 3:
        raise ConfigError("--split needs three counts")
    return dataclasses.replace(spec, images=max(spec.images, sum(args.split)))


def _manifests(args):
    if args.manifest is None:
        return None
    if args.val_manifest is None:
        raise ConfigError("--manifest training needs --val-manifest (and --test-manifest for compare)")
    test = args.test_manifest or args.val_manifest
    return (args.manifest, args.val_manifest, test)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_images=args.batch_images,
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        seed=args.seeds[0],
        model_kind=args.model,
        hidden=args.hidden,
        baseline=BaselineParams(args.gamma, args.alpha, args.beta),
        calib=CalibConfig(args.tau, args.upsilon),
        mix=args.mix,
    )


def _loss_settings(args, default=("ce",)) -> list[LossSetting]:
    names = args.loss or list(default)
    return [LossSetting(n, args.tau, args.upsilon, args.gamma, args.alpha, args.beta, args.mix) for n in names]


def _experiment(args, default_losses) -> ExperimentSpec:
    manifests = _manifests(args)
    return ExperimentSpec(
        losses=_loss_settings(args, default_losses),
        train=_train_config(args),
        seeds=args.seeds,
        synth=None if manifests else _synth_spec(args),
        splits=tuple(args.split),
        manifests=manifests,
        out_dir=args.out,
    )


def _need_manifest(args):
    if args.manifest is None:
        raise ConfigError(f"'{args.command}' needs --manifest")
    return load_manifest(args.manifest, args.classes)


def _write(out: Path | None, default_name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = out / default_name if out.suffix == "" else out
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _stats_csv(stats: ClassStats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "n_k", "p_k"])
    for k, (nk, pk) in enumerate(zip(stats.pixel_counts, stats.frequencies)):
        w.writerow([k, int(nk), f"{pk:.17g}"])
    w.writerow(["total", stats.total, ""])
    w.writerow(["pixels_per_image", stats.pixels_per_image, ""])
    return buf.getvalue()


def read_stats_csv(path) -> ClassStats:
    counts, m = [], 1
    rows = csv.reader(ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#"))
    next(rows)
    for row in rows:
        if row[0] == "pixels_per_image":
            m = int(row[1])
        elif row[0] != "total":
            counts.append(int(row[1]))
    return ClassStats(np.array(counts), m)


# --- commands ----------------------------------------------------------------------


def cmd_stats(args):
    stats = class_stats(_need_manifest(args))
    _write(args.out, "stats.csv", header({"manifest": str(args.manifest)}) + _stats_csv(stats))


def cmd_calibrate(args):
    stats = read_stats_csv(args.stats) if args.stats else class_stats(_need_manifest(args))
    offsets = compute_offsets(stats, CalibConfig(args.tau, args.upsilon))
    _write(args.out, "offsets.rho", format_offsets(offsets))


def cmd_synth(args):
    spec = _synth_spec(args)
    if args.out is None:
        raise ConfigError("'synth' needs --out")
    data = generate(spec)
    write_dataset(data, args.out)
    a, b, c = args.split
    if a + b + c <= len(data):
        for name, part in zip(("train", "val", "test"), split(data, a, b, c)):
            write_dataset(part, Path(args.out) / name)
    log.info("realized frequencies %s", np.round(data.realized_frequencies(), 5).tolist())


def cmd_train(args):
    if args.loss and len(args.loss) > 1:
        raise ConfigError("'train' takes a single --loss")
    exp = _experiment(args, ("ce",))
    tr, va, te = exp.datasets(args.seeds[0])
    cfg = exp.losses[0].apply(exp.train, args.seeds[0])
    model, tlog = train(tr, va, cfg)
    rep = evaluate(model, va)
    log.info("validation mIoU %.4f", rep.miou)
    if args.out is None:
        sys.stdout.write(tlog.to_csv())
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.mdl")
    (out / "trainlog.csv").write_text(header(exp.describe()) + tlog.to_csv())
    from .plotting import plot_curves

    plot_curves({exp.losses[0].label: tlog}, out / "curves.svg")


def cmd_eval(args):
    manifest = _need_manifest(args)
    if args.model_file is not None:
        model = load_model(args.model_file)
        rep = evaluate(model, load_dataset(manifest))
    else:
        cm = ConfusionMatrix(manifest.classes)
        for scores_path, mask_path in manifest.entries:
            scores = load_scores(scores_path)
            if scores.classes != manifest.classes:
                raise FormatError(f"{scores_path} has {scores.classes} channels, expected {manifest.classes}")
            mask = load_mask(mask_path, manifest.classes)
            if (mask.height, mask.width) != (scores.height, scores.width):
                raise ShapeError(f"{scores_path} and {mask_path} differ in shape")
            cm = accumulate(cm, mask.flat(), np.argmax(scores.flat(), axis=1))
        rep = report(cm)
    cfg = {"manifest": str(args.manifest), "model": str(args.model_file) if args.model_file else None}
    _write(args.out, "metrics.csv", header(cfg) + rep.to_csv())


def cmd_compare(args):
    rep = run_compare(_experiment(args, ("ce", "mc")))
    if args.out is None:
        sys.stdout.write(rep.to_csv())
    for s in rep.summary():
        log.info("%-28s mIoU %.4f +- %.4f", s["loss"], s["miou_mean"], s["miou_std"])


def cmd_gap(args):
    rep = run_gap(_experiment(args, ("ce", "mc")))
    if args.out is None:
        sys.stdout.write(rep.to_csv())


def cmd_bound(args):
    config = CalibConfig(args.tau, args.upsilon)
    if args.stats is not None:
        source = read_stats_csv(args.stats)
        manifest = None
    else:
        manifest = _need_manifest(args)
        source = manifest
    rep = run_bound(source, config, args.F, args.eta, args.trials, manifest, None)
    cfg = {"tau": args.tau, "upsilon": args.upsilon, "F": args.F, "eta": args.eta,
           "trials": args.trials, "optimal": rep.optimal}
    _write(args.out, "bound.csv", header(cfg) + rep.to_csv())
    if rep.vacuous:
        log.warning("bound is vacuous for every class at F=%g", args.F)


COMMANDS = {
    "stats": cmd_stats,
    "calibrate": cmd_calibrate,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gap": cmd_gap,
    "bound": cmd_bound,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except TrainingAbort as exc:
        print(f"margincal: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, InfeasibleSpecError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"margincal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CalibrationError, ValueError, TypeError) as exc:
        print(f"margincal: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
