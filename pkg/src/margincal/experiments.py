"""Desk-scale experiment pipelines behind the ``compare``, ``gap`` and ``bound`` commands."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundConfig, BoundReport, bound_report
from .calibration import CalibConfig, ClassStats, class_stats
from .core import DatasetManifest, load_mask, load_scores
from .losses import BaselineParams
from .synth import SynthData, SynthSpec, generate, split
from .trainer import TrainConfig, TrainingAbort, TrainLog, evaluate, train

log = logging.getLogger(__name__)

# noise level at which cross-entropy lands mid-range on the default synthetic task
DEFAULT_NOISE_SIGMA = 0.4
DEFAULT_SPLITS = (200, 50, 50)


def default_synth(seed: int = 0, noise_sigma: float = DEFAULT_NOISE_SIGMA) -> SynthSpec:
    return SynthSpec(
        seed=seed,
        images=sum(DEFAULT_SPLITS),
        height=32,
        width=32,
        classes=3,
        target_frequencies=(0.89, 0.10, 0.01),
        noise_sigma=noise_sigma,
        feature_channels=8,
    )


@dataclass(frozen=True)
class LossSetting:
    """One loss configuration in a comparison."""

    name: str
    tau: float = 10.0
    upsilon: float = 1.0
    gamma: float = 2.0
    alpha: float = 0.3
    beta: float = 0.7
    mix: float = 0.5

    @property
    def label(self) -> str:
        if self.name.startswith("mc"):
            return f"{self.name}(tau={self.tau:g},upsilon={self.upsilon:g})"
        if self.name == "focal":
            return f"focal(gamma={self.gamma:g})"
        if self.name == "tversky":
            return f"tversky(alpha={self.alpha:g},beta={self.beta:g})"
        return self.name

    def apply(self, base: TrainConfig, seed: int) -> TrainConfig:
        baseline = dataclasses.replace(
            base.baseline, focal_gamma=self.gamma, tversky_alpha=self.alpha, tversky_beta=self.beta
        )
        return dataclasses.replace(
            base,
            loss=self.name,
            seed=seed,
            baseline=baseline,
            calib=CalibConfig(self.tau, self.upsilon),
            mix=self.mix,
        )


@dataclass
class ExperimentSpec:
    losses: list[LossSetting]
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    synth: SynthSpec | None = None
    splits: tuple[int, int, int] = DEFAULT_SPLITS
    manifests: tuple[Path, Path, Path] | None = None
    out_dir: Path | None = None

    def __post_init__(self):
        if not self.losses:
            raise ValueError("at least one loss configuration is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.synth is None and self.manifests is None:
            self.synth = default_synth()

    def datasets(self, seed: int) -> tuple[SynthData, SynthData, SynthData]:
        """Train/val/test data for one seed; synthetic data is regenerated per seed."""
        if self.manifests is not None:
            return tuple(load_dataset(m) for m in self.manifests)
        spec = dataclasses.replace(self.synth, seed=self.synth.seed + seed, images=sum(self.splits))
        return split(generate(spec), *self.splits)

    def describe(self) -> dict:
        return {
            "losses": [dataclasses.asdict(s) for s in self.losses],
            "train": _config_dict(self.train),
            "seeds": list(self.seeds),
            "synth": dataclasses.asdict(self.synth) if self.synth else None,
            "splits": list(self.splits),
            "manifests": [str(m) for m in self.manifests] if self.manifests else None,
        }


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["warmup_resolved"] = cfg.warmup
    return d


def header(config: dict) -> str:
    """Comment lines that make a report file reproducible on its own."""
    lines = [
        f"# margincal {__version__}; numpy {np.__version__}; python {platform.python_version()}",
        "# config: " + json.dumps(config, sort_keys=True, default=str),
    ]
    return "\n".join(lines) + "\n"


def load_dataset(manifest: DatasetManifest | str | Path) -> SynthData:
    """Features (SCR1 with one channel per feature) and masks listed in a manifest."""
    from .core import load_manifest

    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    feats, masks = [], []
    for feat_path, mask_path in manifest.entries:
        f = load_scores(feat_path)
        m = load_mask(mask_path, manifest.classes)
        if (f.height, f.width) != (m.height, m.width):
            raise ValueError(f"{feat_path} and {mask_path} differ in shape")
        feats.append(f.data)
        masks.append(m.data)
    return SynthData(np.stack(feats), np.stack(masks), manifest.classes)


# --- compare -----------------------------------------------------------------


@dataclass
class CompareRow:
    loss: str
    seed: int
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    status: str = "ok"
    log: TrainLog | None = field(default=None, repr=False)


@dataclass
class CompareReport:
    rows: list[CompareRow]
    classes: int
    config: dict

    def by_loss(self) -> dict[str, list[CompareRow]]:
        out: dict[str, list[CompareRow]] = {}
        for r in self.rows:
            out.setdefault(r.loss, []).append(r)
        return out

    def mious(self, loss: str) -> np.ndarray:
        return np.array([r.miou for r in self.by_loss()[loss]])

    def summary(self) -> list[dict]:
        out = []
        for loss, rows in self.by_loss().items():
            ok = [r for r in rows if r.status == "ok"]
            m = np.array([r.miou for r in ok])
            ious = np.array([r.per_class_iou for r in ok]) if ok else np.zeros((0, self.classes))
            out.append({
                "loss": loss,
                "runs": len(rows),
                "failed": len(rows) - len(ok),
                "miou_mean": float(m.mean()) if m.size else math.nan,
                "miou_std": float(m.std(ddof=1)) if m.size > 1 else 0.0,
                "miou_min": float(m.min()) if m.size else math.nan,
                "miou_max": float(m.max()) if m.size else math.nan,
                "per_class_iou_mean": ious.mean(axis=0) if ok else np.full(self.classes, math.nan),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(header(self.config))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "seed", *[f"iou_{k}" for k in range(self.classes)], "miou",
                    "pixel_accuracy", "status"])
        for r in self.rows:
            w.writerow([r.loss, r.seed, *[f"{v:.6f}" for v in r.per_class_iou], f"{r.miou:.6f}",
                        f"{r.pixel_accuracy:.6f}", r.status])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write(header(self.config))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "runs", "failed", *[f"iou_{k}_mean" for k in range(self.classes)],
                    "miou_mean", "miou_std", "miou_min", "miou_max"])
        for s in self.summary():
            w.writerow([s["loss"], s["runs"], s["failed"],
                        *[f"{v:.6f}" for v in s["per_class_iou_mean"]],
                        f"{s['miou_mean']:.6f}", f"{s['miou_std']:.6f}",
                        f"{s['miou_min']:.6f}", f"{s['miou_max']:.6f}"])
        return buf.getvalue()


def run_cell(setting: LossSetting, base: TrainConfig, seed: int, data) -> CompareRow:
    tr, va, te = data
    cfg = setting.apply(base, seed)
    try:
        model, tlog = train(tr, va, cfg)
    except TrainingAbort as exc:
        log.error("%s seed %d aborted: %s", setting.label, seed, exc)
        nan = np.full(tr.classes, math.nan)
        return CompareRow(setting.label, seed, nan, math.nan, math.nan, f"abort: {exc}")
    rep = evaluate(model, te)
    return CompareRow(setting.label, seed, rep.per_class_iou, rep.miou, rep.pixel_accuracy, log=tlog)


def run_compare(spec: ExperimentSpec) -> CompareReport:
    """Train every (loss, seed) cell and evaluate it on the test split."""
    rows = []
    classes = None
    for seed in spec.seeds:
        data = spec.datasets(seed)
        classes = data[0].classes
        for setting in spec.losses:
            rows.append(run_cell(setting, spec.train, seed, data))
            log.info("%s seed %d: mIoU %.4f", rows[-1].loss, seed, rows[-1].miou)
    report = CompareReport(rows, classes, spec.describe())
    if spec.out_dir is not None:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(report.to_csv())
        (out / "compare_summary.csv").write_text(report.summary_csv())
        from .plotting import plot_curves

        first_seed = spec.seeds[0]
        logs = {r.loss: r.log for r in rows if r.seed == first_seed and r.log is not None}
        if logs:
            plot_curves(logs, out / "compare_curves.svg", title=f"seed {first_seed}")
    return report


# --- gap -----------------------------------------------------------------------


@dataclass
class GapReport:
    logs: dict[tuple[str, int], TrainLog]
    config: dict

    def gap(self, loss: str, seed: int) -> np.ndarray:
        tlog = self.logs[(loss, seed)]
        tr = tlog.column("train_loss")
        return np.abs(tlog.column("val_loss") - tr) / tr

    def final_gap(self, loss: str, seed: int) -> float:
        g = self.gap(loss, seed)
        return float(g[-1]) if g.size else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(header(self.config))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "seed", "epoch", "train_loss", "val_loss", "train_miou", "val_miou", "gap"])
        for (loss, seed), tlog in self.logs.items():
            gaps = self.gap(loss, seed)
            for r, g in zip(tlog.records, gaps):
                w.writerow([loss, seed, r.epoch, f"{r.train_loss:.8g}", f"{r.val_loss:.8g}",
                            f"{r.train_miou:.6f}", f"{r.val_miou:.6f}", f"{g:.8g}"])
        return buf.getvalue()


def run_gap(spec: ExperimentSpec) -> GapReport:
    """Train each loss from scratch (no warm-up) and record the train/val loss gap."""
    base = dataclasses.replace(spec.train, warmup_epochs=0)
    logs = {}
    for seed in spec.seeds:
        tr, va, _ = spec.datasets(seed)
        for setting in spec.losses:
            cfg = setting.apply(base, seed)
            try:
                _, tlog = train(tr, va, cfg)
            except TrainingAbort as exc:
                log.error("%s seed %d aborted: %s", setting.label, seed, exc)
                tlog = TrainLog()
            logs[(setting.label, seed)] = tlog
    report = GapReport(logs, spec.describe())
    if spec.out_dir is not None:
        from .plotting import plot_curves, plot_gap

        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gap.csv").write_text(report.to_csv())
        first = spec.seeds[0]
        labels = [s.label for s in spec.losses]
        plot_curves({lb: logs[(lb, first)] for lb in labels}, out / "gap_curves.svg", title=f"seed {first}")
        plot_gap(
            {lb: (logs[(lb, first)].column("epoch"), report.gap(lb, first)) for lb in labels},
            out / "gap.svg",
        )
    return report


# --- bound -----------------------------------------------------------------------


def run_bound(
    stats: ClassStats | DatasetManifest,
    config: CalibConfig,
    F: float,
    eta: float = 0.05,
    trials: int = 200,
    manifest: DatasetManifest | None = None,
    out_dir: Path | None = None,
) -> BoundReport:
    """Calibrate offsets, evaluate the error bound and audit the optimality of the ratios.

    When ``manifest`` lists score files with one channel per class, the
    surrogate errors and IoU lower bounds of those scores are included.
    """
    if isinstance(stats, DatasetManifest):
        manifest = manifest or stats
        stats = class_stats(stats)
    bc = BoundConfig(F=F, eta=eta, m=stats.pixels_per_image, c=stats.classes)
    scores = labels = None
    if manifest is not None:
        first = load_scores(manifest.entries[0][0])
        if first.classes == stats.classes:
            scores = np.concatenate([load_scores(s).flat() for s, _ in manifest.entries])
            labels = np.concatenate([load_mask(m, manifest.classes).flat() for _, m in manifest.entries])
    rep = bound_report(stats, config, bc, trials, scores, labels)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg = {"tau": config.tau, "upsilon": config.upsilon, "F": F, "eta": eta, "trials": trials,
               "pixel_counts": stats.pixel_counts.tolist(), "optimal": rep.optimal}
        (out / "bound.csv").write_text(header(cfg) + rep.to_csv())
    return rep
