"""Label statistics and closed-form per-class margin offsets.

The offset for "non-k pixel scored as k" is proportional to
``sqrt(n - n_k) / n_k``, so rare classes receive larger offsets. The offset
for "class-k pixel scored as non-k" is ``mu_k`` times that, with

    mu_k = p_k sqrt(n_k) / (upsilon (n - n_k) - p_k sqrt(n - n_k)).

Offsets are scaled so that their mean over classes equals ``tau``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DatasetManifest, LabelMask

log = logging.getLogger(__name__)

DEFAULT_TAU = 10.0
DEFAULT_UPSILON = 1.0


class CalibrationError(ValueError):
    def __init__(self, message: str, cls: int | None = None, min_upsilon: float | None = None):
        super().__init__(message)
        self.cls = cls
        self.min_upsilon = min_upsilon


@dataclass(frozen=True)
class ClassStats:
    pixel_counts: np.ndarray
    pixels_per_image: int

    def __post_init__(self):
        counts = np.asarray(self.pixel_counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 2:
            raise ValueError("need pixel counts for at least two classes")
        if np.any(counts < 0):
            raise ValueError("negative pixel count")
        if counts.sum() == 0:
            raise ValueError("no pixels counted")
        object.__setattr__(self, "pixel_counts", counts)

    @property
    def classes(self) -> int:
        return int(self.pixel_counts.size)

    @property
    def total(self) -> int:
        return int(self.pixel_counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.pixel_counts / self.total

    @property
    def missing(self) -> np.ndarray:
        """Indices of classes with zero pixels (calibration undefined)."""
        return np.flatnonzero(self.pixel_counts == 0)


def class_stats(
    source: DatasetManifest | Iterable[LabelMask | np.ndarray], classes: int | None = None
) -> ClassStats:
    """Exact per-class pixel counts over every mask of a dataset."""
    if isinstance(source, DatasetManifest):
        classes = source.classes
        masks = source.masks()
    else:
        masks = source
    counts = None
    m = None
    for mask in masks:
        if isinstance(mask, LabelMask):
            classes = classes or mask.classes
            flat = mask.flat()
        else:
            flat = np.asarray(mask).reshape(-1)
        if classes is None:
            raise ValueError("class count unknown for raw label arrays")
        if counts is None:
            counts = np.zeros(classes, dtype=np.int64)
            m = flat.size
        counts += np.bincount(flat, minlength=classes)[:classes]
    if counts is None:
        raise ValueError("no masks to count")
    stats = ClassStats(counts, int(m))
    if stats.missing.size:
        log.warning("classes with zero pixels: %s", stats.missing.tolist())
    return stats


@dataclass(frozen=True)
class CalibConfig:
    tau: float = DEFAULT_TAU
    upsilon: float = DEFAULT_UPSILON

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (self.upsilon > 0 and math.isfinite(self.upsilon)):
            raise ValueError(f"upsilon must be positive, got {self.upsilon}")


@dataclass(frozen=True)
class MarginOffsets:
    rho_0k: np.ndarray
    rho_k0: np.ndarray
    mu_k: np.ndarray
    config: CalibConfig

    def __post_init__(self):
        for name in ("rho_0k", "rho_k0", "mu_k"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or np.any(~np.isfinite(arr)) or np.any(arr <= 0):
                raise ValueError(f"{name} must be a vector of positive finite values")
            object.__setattr__(self, name, arr)
        if not (self.rho_0k.size == self.rho_k0.size == self.mu_k.size):
            raise ValueError("offset vectors differ in length")

    @property
    def classes(self) -> int:
        return int(self.rho_0k.size)

    @classmethod
    def uniform(cls, classes: int, rho: float = 1.0) -> "MarginOffsets":
        ones = np.ones(classes)
        return cls(ones * rho, ones * rho, ones, CalibConfig(tau=rho))


def compute_mu(stats: ClassStats, upsilon: float) -> np.ndarray:
    """Ratio ``rho_k0 / rho_0k`` per class for a given ``upsilon``."""
    return np.array([_mu_one(stats, k, upsilon) for k in range(stats.classes)])


def offset_shape(stats: ClassStats) -> np.ndarray:
    """Unnormalized optimal offsets ``sqrt(n - n_k) / n_k`` (inf for empty classes)."""
    n = stats.total
    nk = stats.pixel_counts.astype(np.float64)
    with np.errstate(divide="ignore"):
        return np.sqrt(n - nk) / nk


def compute_offsets(stats: ClassStats, config: CalibConfig | None = None) -> MarginOffsets:
    """Margin offsets minimizing the mIoU error bound for a fixed offset sum.

    Classes with zero pixels are left out of the normalization and receive the
    largest calibrated offsets.
    """
    config = config or CalibConfig()
    present = stats.pixel_counts > 0
    if present.sum() < 1:
        raise CalibrationError("no class has any pixels")
    if not present.all():
        log.warning(
            "classes %s have no pixels; assigning the largest calibrated offset",
            np.flatnonzero(~present).tolist(),
        )

    shape = offset_shape(stats)[present]
    if np.any(shape == 0):
        k = int(np.flatnonzero(present)[np.argmin(shape)])
        raise CalibrationError(f"class {k} covers every pixel; offsets undefined", cls=k)
    rho_0k = np.empty(stats.classes)
    rho_0k[present] = shape * (config.tau / shape.mean())

    mu = np.empty(stats.classes)
    for k in np.flatnonzero(present):
        mu[k] = _mu_one(stats, int(k), config.upsilon)
    rho_k0 = np.empty(stats.classes)
    rho_k0[present] = mu[present] * rho_0k[present]
    if not present.all():
        rho_0k[~present] = rho_0k[present].max()
        rho_k0[~present] = rho_k0[present].max()
        mu[~present] = rho_k0[~present] / rho_0k[~present]
    return MarginOffsets(rho_0k, rho_k0, mu, config)


def _mu_one(stats: ClassStats, k: int, upsilon: float) -> float:
    n = stats.total
    nk = float(stats.pixel_counts[k])
    pk = nk / n
    rest = n - nk
    denom = upsilon * rest - pk * math.sqrt(rest)
    if not denom > 0:
        min_up = pk / math.sqrt(rest) if rest > 0 else math.inf
        raise CalibrationError(
            f"class {k}: mu denominator {denom:.6g} <= 0; upsilon must exceed {min_up:.6g}",
            cls=k,
            min_upsilon=min_up,
        )
    return pk * math.sqrt(nk) / denom


def format_offsets(offsets: MarginOffsets) -> str:
    cfg = offsets.config
    lines = [f"RHO1 {offsets.classes} {cfg.tau!r} {cfg.upsilon!r}"]
    for k in range(offsets.classes):
        lines.append(
            f"{k} {offsets.rho_0k[k]:.17g} {offsets.rho_k0[k]:.17g} {offsets.mu_k[k]:.17g}"
        )
    return "\n".join(lines) + "\n"


def save_offsets(offsets: MarginOffsets, path) -> None:
    Path(path).write_text(format_offsets(offsets), encoding="ascii")


def load_offsets(path) -> MarginOffsets:
    lines = [ln for ln in Path(path).read_text(encoding="ascii").splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "RHO1":
        raise ValueError(f"{path}: bad offsets header {lines[0]!r}")
    c = int(head[1])
    config = CalibConfig(float(head[2]), float(head[3]))
    rows = [ln.split() for ln in lines[1:]]
    if len(rows) != c:
        raise ValueError(f"{path}: expected {c} class rows, found {len(rows)}")
    table = np.array([[float(v) for v in row[1:4]] for row in sorted(rows, key=lambda r: int(r[0]))])
    return MarginOffsets(table[:, 0], table[:, 1], table[:, 2], config)
