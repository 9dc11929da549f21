"""Empirical IoU lower bounds and the margin-based mIoU error bound.

``epsilon_bound`` evaluates, per class,

    eps_k = (sqrt(n - n_k) + sqrt(n_k) / mu_k) / (n_k rho_0k / (4 c F) - sqrt(n - n_k))

and a class whose denominator is not positive makes the bound vacuous.
``F`` stands in for the hypothesis-class complexity plus the confidence term
and must be supplied by the caller; :func:`sigma_term` computes the latter.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibConfig, ClassStats, MarginOffsets, compute_mu, compute_offsets
from .core import ShapeError
from .losses import _prepare, calibrated_log, margins, rho_margin
from .metrics import ConfusionMatrix, EmptyMatrixError

log = logging.getLogger(__name__)


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorProbs:
    p_k0: np.ndarray
    p_0k: np.ndarray
    p_k: np.ndarray
    n: int


def error_probs(cm: ConfusionMatrix) -> ErrorProbs:
    """Missed-class and false-alarm probabilities per class from a confusion matrix."""
    n = cm.total
    if n == 0:
        raise EmptyMatrixError("confusion matrix is empty")
    counts = cm.counts
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    return ErrorProbs((rows - diag) / n, (cols - diag) / n, rows / n, n)


def iou_from_probs(probs: ErrorProbs) -> np.ndarray:
    num = probs.p_k - probs.p_k0
    den = probs.p_k + probs.p_0k
    out = np.ones_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


@dataclass(frozen=True)
class SurrogateErrors:
    ell_k0: np.ndarray
    ell_0k: np.ndarray
    n: int


def surrogate_ell(scores, labels, offsets: MarginOffsets, variant: str = "rho_margin") -> SurrogateErrors:
    """Margin-loss upper estimates of the two per-class error probabilities.

    ``variant`` picks the piecewise-linear ``rho_margin`` loss or the smooth
    ``calibrated_log`` loss, which dominates it pointwise.
    """
    if variant == "rho_margin":
        phi = rho_margin
    elif variant == "calibrated_log":
        phi = calibrated_log
    else:
        raise ValueError(f"unknown surrogate variant {variant!r}")
    s, y, _ = _prepare(scores, labels)
    n, c = s.shape
    if offsets.classes != c:
        raise ShapeError(f"offsets cover {offsets.classes} classes, scores have {c}")
    if n == 0:
        raise ValueError("no pixels")
    lam = margins(s)
    own = np.zeros((n, c), dtype=bool)
    own[np.arange(n), y] = True
    ell_k0 = np.where(own, phi(lam, offsets.rho_k0[None, :]), 0.0).sum(axis=0) / n
    ell_0k = np.where(~own, phi(-lam, offsets.rho_0k[None, :]), 0.0).sum(axis=0) / n
    return SurrogateErrors(ell_k0, ell_0k, n)


@dataclass(frozen=True)
class IoULowerBound:
    per_class: np.ndarray
    miou: float
    nonpositive: np.ndarray  # numerator <= 0: bound carries no information
    degenerate: np.ndarray  # zero denominator, resolved by the 0/0 = 1 convention


def iou_lower_bound(probs: ErrorProbs, ell: SurrogateErrors) -> IoULowerBound:
    num = probs.p_k - ell.ell_k0
    den = probs.p_k + ell.ell_0k
    degenerate = den <= 0
    if np.any(degenerate & (np.abs(num) > 0)):
        raise BoundError("zero denominator with non-zero numerator")
    per_class = np.ones_like(num)
    ok = ~degenerate
    per_class[ok] = num[ok] / den[ok]
    nonpositive = ok & (num <= 0)
    return IoULowerBound(per_class, float(per_class.mean()), nonpositive, degenerate)


@dataclass(frozen=True)
class BoundConfig:
    F: float = 1.0
    eta: float = 0.05
    m: int = 1
    c: int = 2

    def __post_init__(self):
        if not self.F > 0:
            raise ValueError("F must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")


def sigma_term(offsets: MarginOffsets, eta: float, m: int) -> float:
    """Confidence term ``(rho_max / 4c) sqrt(2 m log(2c / eta))``."""
    c = offsets.classes
    rho_max = float(max(offsets.rho_0k.max(), offsets.rho_k0.max()))
    return rho_max / (4 * c) * math.sqrt(2 * m * math.log(2 * c / eta))


@dataclass
class BoundReport:
    epsilon_k: np.ndarray
    epsilon: float
    valid: np.ndarray
    rho_0k: np.ndarray
    rho_k0: np.ndarray
    mu_k: np.ndarray
    pixel_counts: np.ndarray
    F: float
    surrogate_ell_k0: np.ndarray | None = None
    surrogate_ell_0k: np.ndarray | None = None
    iou_lower: np.ndarray | None = None
    miou_lower: float | None = None
    optimal: bool | None = None
    extra: dict = field(default_factory=dict)

    @property
    def vacuous(self) -> bool:
        return not bool(self.valid.any())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ratio_base = self.rho_0k[-1]
        w.writerow(
            ["class", "n_k", "rho_0k", "rho_k0", "mu_k", "rho_ratio_to_last", "epsilon_k", "vacuous",
             "ell_k0", "ell_0k", "iou_lower"]
        )
        for k in range(self.rho_0k.size):
            w.writerow([
                k,
                int(self.pixel_counts[k]),
                f"{self.rho_0k[k]:.17g}",
                f"{self.rho_k0[k]:.17g}",
                f"{self.mu_k[k]:.17g}",
                f"{self.rho_0k[k] / ratio_base:.17g}",
                f"{self.epsilon_k[k]:.17g}" if self.valid[k] else "",
                int(not self.valid[k]),
                "" if self.surrogate_ell_k0 is None else f"{self.surrogate_ell_k0[k]:.17g}",
                "" if self.surrogate_ell_0k is None else f"{self.surrogate_ell_0k[k]:.17g}",
                "" if self.iou_lower is None else f"{self.iou_lower[k]:.17g}",
            ])
        eps = "" if math.isnan(self.epsilon) else f"{self.epsilon:.17g}"
        miou_lower = "" if self.miou_lower is None else f"{self.miou_lower:.17g}"
        w.writerow(["summary", int(self.pixel_counts.sum()), "", "", "", "", eps,
                    int(self.vacuous), "", "", miou_lower])
        return buf.getvalue()


def epsilon_terms(nk: np.ndarray, rho_0k: np.ndarray, mu_k: np.ndarray, F: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-class error terms and validity flags (inf where vacuous)."""
    nk = np.asarray(nk, dtype=np.float64)
    c = nk.size
    n = nk.sum()
    rest = np.sqrt(n - nk)
    den = nk * rho_0k / (4 * c * F) - rest
    valid = den > 0
    num = rest + np.sqrt(nk) / mu_k
    eps = np.full(c, np.inf)
    eps[valid] = num[valid] / den[valid]
    return eps, valid


def epsilon_bound(
    stats: ClassStats, offsets: MarginOffsets, bc: BoundConfig, valid_only: bool = False
) -> BoundReport:
    """Error bound between the empirical lower-bound mIoU and the population mIoU.

    ``epsilon`` is NaN when any class is vacuous, unless ``valid_only`` asks for
    the mean over valid classes instead.
    """
    if offsets.classes != stats.classes:
        raise ShapeError("offsets and stats disagree on the class count")
    eps, valid = epsilon_terms(stats.pixel_counts, offsets.rho_0k, offsets.mu_k, bc.F)
    if not valid.any():
        epsilon = math.nan
        log.warning("error bound is vacuous for every class")
    elif valid.all():
        epsilon = float(eps.mean())
    elif valid_only:
        epsilon = float(eps[valid].mean())
    else:
        epsilon = math.nan
    return BoundReport(
        epsilon_k=eps,
        epsilon=epsilon,
        valid=valid,
        rho_0k=offsets.rho_0k,
        rho_k0=offsets.rho_k0,
        mu_k=offsets.mu_k,
        pixel_counts=stats.pixel_counts,
        F=bc.F,
    )


@dataclass(frozen=True)
class OptimalityVerdict:
    holds: bool
    epsilon_calibrated: float
    worst_epsilon: float
    worst_rho_0k: np.ndarray | None
    trials: int


def verify_optimality(
    stats: ClassStats,
    config: CalibConfig,
    bc: BoundConfig,
    trials: int = 200,
    seed: int = 0,
    rtol: float = 1e-9,
    atol: float = 0.0,
) -> OptimalityVerdict:
    """Random search for offset vectors (same sum, same ``mu``) beating the calibrated ones.

    Half of the trials draw from a flat Dirichlet over the simplex, the other
    half perturb the calibrated point multiplicatively at several scales.
    Trial ``t`` draws from its own stream seeded by ``(seed, t)``.
    """
    offsets = compute_offsets(stats, config)
    mu = compute_mu(stats, config.upsilon)
    nk = stats.pixel_counts
    eps_cal, valid = epsilon_terms(nk, offsets.rho_0k, mu, bc.F)
    if not valid.all():
        raise BoundError(
            f"bound vacuous at the calibrated offsets for classes {np.flatnonzero(~valid).tolist()}"
        )
    e_cal = float(eps_cal.mean())
    if trials <= 0:
        log.warning("verify_optimality called with no trials; verdict is vacuous")
        return OptimalityVerdict(True, e_cal, math.inf, None, 0)

    total = offsets.rho_0k.sum()
    c = stats.classes
    worst = math.inf
    worst_rho = None
    holds = True
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        if t % 2 == 0:
            rho = rng.dirichlet(np.ones(c)) * total
        else:
            scale = 10.0 ** rng.uniform(-6, 0)
            rho = offsets.rho_0k * np.exp(scale * rng.standard_normal(c))
            rho *= total / rho.sum()
        eps, ok = epsilon_terms(nk, rho, mu, bc.F)
        e = float(eps.mean()) if ok.all() else math.inf
        if e < worst:
            worst, worst_rho = e, rho
        if not e_cal <= e * (1 + rtol) + atol:
            holds = False
    return OptimalityVerdict(holds, e_cal, worst, worst_rho, trials)


def bound_report(
    stats: ClassStats,
    config: CalibConfig,
    bc: BoundConfig,
    trials: int = 200,
    scores=None,
    labels=None,
    seed: int = 0,
) -> BoundReport:
    """Calibrate, evaluate the error bound and check optimality in one pass.

    When scores and labels are given, the surrogate errors and the IoU lower
    bounds (piecewise-linear variant) are filled in as well.
    """
    offsets = compute_offsets(stats, config)
    rep = epsilon_bound(stats, offsets, bc)
    if rep.valid.all():
        rep.optimal = verify_optimality(stats, config, bc, trials, seed).holds
    if scores is not None:
        from .metrics import confusion_matrix

        s, y, _ = _prepare(scores, labels)
        cm = confusion_matrix(y, np.argmax(s, axis=1), stats.classes)
        ell = surrogate_ell(s, y, offsets, "rho_margin")
        lb = iou_lower_bound(error_probs(cm), ell)
        rep.surrogate_ell_k0 = ell.ell_k0
        rep.surrogate_ell_0k = ell.ell_0k
        rep.iou_lower = lb.per_class
        rep.miou_lower = lb.miou
    return rep
