"""Segmentation losses as pure (value, gradient) computations.

Every loss takes ``scores`` of shape ``(..., c)`` and integer ``labels`` of
shape ``(...)`` and returns a :class:`LossResult` whose gradient has the shape
of ``scores``. Pixel sums use numpy's pairwise summation over a fixed memory
layout, so results are reproducible for a given input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .calibration import MarginOffsets
from .core import LabelMask, ScoreMap, ShapeError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossResult:
    value: float
    gradient: np.ndarray


LossFn = Callable[[np.ndarray, np.ndarray], LossResult]


@dataclass(frozen=True)
class BaselineParams:
    focal_gamma: float = 2.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    dice_smooth: float = 1e-6
    class_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        for name in ("tversky_alpha", "tversky_beta"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be positive")


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray, tuple]:
    if isinstance(scores, ScoreMap):
        scores = scores.data
    if isinstance(labels, LabelMask):
        labels = labels.data
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim < 1 or scores.shape[:-1] != labels.shape:
        raise ShapeError(f"scores {scores.shape} do not match labels {labels.shape}")
    c = scores.shape[-1]
    s = scores.reshape(-1, c)
    y = labels.reshape(-1).astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError("label outside [0, classes)")
    return s, y, scores.shape


def _onehot(y: np.ndarray, c: int) -> np.ndarray:
    g = np.zeros((y.size, c))
    g[np.arange(y.size), y] = 1.0
    return g


def softmax(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


# --- margins and the two scalar surrogates -------------------------------


def _top_two(st: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row of the largest and of the runner-up entry in each column of ``(c, n)`` scores.

    Both pick the lowest index on ties. A loop over the (few) classes is much
    faster than ``argmax`` along a short axis.
    """
    c, n = st.shape
    first = np.zeros(n, dtype=np.intp)
    best = st[0]
    for k in range(1, c):
        first = np.where(st[k] > best, k, first)
        best = np.maximum(best, st[k])
    second = np.where(first == 0, 1, 0)
    runner = np.where(first == 0, st[1], st[0])
    for k in range(c):
        better = (st[k] > runner) & (first != k)
        second = np.where(better, k, second)
        runner = np.where(better, st[k], runner)
    return first, second


def _margins_cm(st: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-major margins plus the argmax and runner-up rows."""
    cols = np.arange(st.shape[1])
    first, second = _top_two(st)
    top = st[first, cols]
    lam = st - top
    lam[first, cols] = top - st[second, cols]
    return lam, first, second


def margins(scores) -> np.ndarray:
    """``lambda[i, k] = s[i, k] - max_{j != k} s[i, j]``, same shape as the input."""
    if isinstance(scores, ScoreMap):
        scores = scores.data
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[-1]
    if c < 2:
        raise ValueError("margins need at least two classes")
    st = np.ascontiguousarray(scores.reshape(-1, c).T)
    lam = _margins_cm(st)[0]
    return np.ascontiguousarray(lam.T).reshape(scores.shape)


def rho_margin(lam, rho):
    """Piecewise-linear margin loss ``min(1, max(0, 1 - lam / rho))``."""
    return np.clip(1.0 - np.asarray(lam, dtype=np.float64) / rho, 0.0, 1.0)


def _calibrated_log_parts(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value ``log2(1 + 2**u)`` and its slope ``1 / (1 + 2**-u)``.

    Uses ``u + log1p(2**-u)/ln2`` for ``u > 0`` and ``log1p(2**u)/ln2``
    otherwise, so neither branch overflows.
    """
    t = np.exp2(-np.abs(u))
    value = np.maximum(u, 0.0) + np.log1p(t) / LN2
    with np.errstate(over="ignore"):
        slope = 1.0 / (1.0 + np.exp2(-u))
    return value, slope


def calibrated_log(lam, rho):
    """``log2(1 + 2**(rho - lam))`` without overflow for large ``|rho - lam|``."""
    u = np.asarray(rho, dtype=np.float64) - np.asarray(lam, dtype=np.float64)
    out = _calibrated_log_parts(u)[0]
    return out if out.ndim else float(out)


# --- the margin-calibrated loss -----------------------------------------


def mc_loss(scores, labels, offsets: MarginOffsets) -> LossResult:
    """Margin-calibrated log-loss summed over classes, averaged over pixels.

    For class ``k``, pixels labelled ``k`` pay ``calibrated_log(lam_ik, rho_k0[k])``
    and all other pixels pay ``calibrated_log(-lam_ik, rho_0k[k])``. The max in
    the margin sends its whole subgradient to the lowest-index maximizer.
    """
    s, y, shape = _prepare(scores, labels)
    n, c = s.shape
    if offsets.classes != c:
        raise ShapeError(f"offsets cover {offsets.classes} classes, scores have {c}")
    if n == 0:
        return LossResult(0.0, np.zeros(shape))
    # work class-major: reductions over a short trailing axis are slow in numpy
    cols = np.arange(n)
    lam, first, second = _margins_cm(np.ascontiguousarray(s.T))

    # u = rho - signed margin; the signed margin is lam for the own class, -lam otherwise
    u = lam + offsets.rho_0k[:, None]
    u[y, cols] = offsets.rho_k0[y] - lam[y, cols]
    phi, slope = _calibrated_log_parts(u)
    value = float(phi.sum() / n)

    # d loss / d lam: -slope on the own class, +slope elsewhere
    dlam = slope / n
    dlam[y, cols] *= -1.0
    grad = dlam.copy()
    # lam_ik depends on -s[i, first] for k != first, and on -s[i, second] for k == first
    d_top = dlam[first, cols]
    grad[first, cols] -= dlam.sum(axis=0) - d_top
    grad[second, cols] -= d_top
    return LossResult(value, np.ascontiguousarray(grad.T).reshape(shape))


# --- baselines -------------------------------------------------------------


def _class_weights(weights, c: int) -> np.ndarray:
    if weights is None:
        return np.ones(c)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (c,):
        raise ShapeError(f"need {c} class weights, got {w.shape}")
    return w


def ce_loss(scores, labels, class_weights: Sequence[float] | None = None) -> LossResult:
    """Softmax cross-entropy (natural log), mean over pixels, optionally class-weighted."""
    s, y, shape = _prepare(scores, labels)
    n, c = s.shape
    if n == 0:
        return LossResult(0.0, np.zeros(shape))
    w = _class_weights(class_weights, c)[y]
    z = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    nll = logz - z[np.arange(n), y]
    p = np.exp(z - logz[:, None])
    grad = (p - _onehot(y, c)) * (w / n)[:, None]
    return LossResult(float((w * nll).sum() / n), grad.reshape(shape))


def focal_loss(scores, labels, gamma: float = 2.0) -> LossResult:
    """``(1 - p_y)**gamma * -log p_y`` averaged over pixels."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    s, y, shape = _prepare(scores, labels)
    n, c = s.shape
    if n == 0:
        return LossResult(0.0, np.zeros(shape))
    rows = np.arange(n)
    z = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    logp = z[rows, y] - logz
    p_all = np.exp(z - logz[:, None])
    p = p_all[rows, y]
    q = -np.expm1(logp)  # 1 - p_y without cancellation
    value = float((q**gamma * -logp).sum() / n)

    # d FL / d s_j = coef * (onehot_j - p_j)
    if gamma == 0:
        coef = -np.ones(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            term = gamma * q ** (gamma - 1.0) * p * logp
        term = np.where(q > 0, term, 0.0)
        coef = term - q**gamma
    grad = coef[:, None] * (_onehot(y, c) - p_all) / n
    return LossResult(value, grad.reshape(shape))


def _overlap_from_probs(p: np.ndarray, g: np.ndarray, alpha: float, beta: float, smooth: float, weights):
    """Soft overlap index per class and its gradient w.r.t. probabilities.

    index_k = (TP + s/2) / (TP + alpha FP + beta FN + s/2); with
    alpha = beta = 1/2 this is the soft dice (2 TP + s) / (sum p + sum g + s).
    """
    c = p.shape[1]
    tp = (p * g).sum(axis=0)
    fp = (p * (1.0 - g)).sum(axis=0)
    fn = ((1.0 - p) * g).sum(axis=0)
    num = tp + smooth / 2
    den = tp + alpha * fp + beta * fn + smooth / 2
    index = num / den
    w = _class_weights(weights, c)
    w = w / w.sum()
    value = 1.0 - float((w * index).sum())
    d_den = g + alpha * (1.0 - g) - beta * g
    grad_p = -w * (g * den - num * d_den) / den**2
    return value, grad_p


def dice_loss(scores, labels, smooth: float = 1e-6, class_weights=None) -> LossResult:
    """``1 - mean_k (2 sum p g + s) / (sum p + sum g + s)`` on softmax probabilities."""
    return tversky_loss(scores, labels, 0.5, 0.5, smooth, class_weights)


def tversky_loss(
    scores, labels, alpha: float = 0.3, beta: float = 0.7, smooth: float = 1e-6, class_weights=None
) -> LossResult:
    """One minus the class-averaged soft Tversky index.

    ``alpha`` weighs false positives, ``beta`` false negatives.
    """
    if not (0 < alpha < 1 and 0 < beta < 1):
        raise ValueError("alpha and beta must lie in (0, 1)")
    if not smooth > 0:
        raise ValueError("smooth must be positive")
    s, y, shape = _prepare(scores, labels)
    n, c = s.shape
    p = softmax(s)
    value, grad_p = _overlap_from_probs(p, _onehot(y, c), alpha, beta, smooth, class_weights)
    return LossResult(value, _softmax_backward(p, grad_p).reshape(shape))


def _lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a sorted foreground indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_from_probs(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Lovasz-softmax on ``(n, c)`` probabilities; returns (value, d value / d probs).

    Averaged over classes present in ``labels``.
    """
    n, c = probs.shape
    grad = np.zeros_like(probs)
    present = [k for k in range(c) if np.any(labels == k)]
    if not present:
        return 0.0, grad
    total = 0.0
    for k in present:
        fg = (labels == k).astype(np.float64)
        err = np.abs(fg - probs[:, k])
        order = np.argsort(-err, kind="stable")
        jg = _lovasz_grad(fg[order])
        total += float(err[order] @ jg)
        # d err / d p = +1 on background pixels, -1 on foreground pixels
        d_err = np.empty(n)
        d_err[order] = jg
        grad[:, k] = d_err * np.where(fg > 0, -1.0, 1.0)
    scale = 1.0 / len(present)
    return total * scale, grad * scale


def lovasz_softmax_loss(scores, labels) -> LossResult:
    s, y, shape = _prepare(scores, labels)
    if s.shape[1] < 2:
        raise ValueError("lovasz-softmax needs at least two classes")
    p = softmax(s)
    value, grad_p = lovasz_softmax_from_probs(p, y)
    return LossResult(value, _softmax_backward(p, grad_p).reshape(shape))


def combine(l1: LossFn, l2: LossFn, w: float) -> LossFn:
    """Convex combination ``w * l1 + (1 - w) * l2`` of two losses."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("combination weight must lie in [0, 1]")

    def combined(scores, labels) -> LossResult:
        a = l1(scores, labels)
        b = l2(scores, labels)
        return LossResult(w * a.value + (1 - w) * b.value, w * a.gradient + (1 - w) * b.gradient)

    combined.__name__ = f"combine({getattr(l1, '__name__', 'l1')}, {getattr(l2, '__name__', 'l2')}, {w})"
    return combined


# --- selector used by the trainer and CLI ----------------------------------

LOSS_NAMES = ("ce", "focal", "dice", "tversky", "lovasz", "mc", "mc+dice", "mc+tversky")


def make_loss(
    name: str,
    offsets: MarginOffsets | None = None,
    params: BaselineParams | None = None,
    mix: float = 0.5,
) -> LossFn:
    """Bind a named loss to its parameters, giving a ``(scores, labels)`` callable."""
    params = params or BaselineParams()
    weights = params.class_weights

    def need_offsets():
        if offsets is None:
            raise ValueError(f"loss '{name}' needs margin offsets")
        return offsets

    if name == "ce":
        fn = lambda s, y: ce_loss(s, y, weights)  # noqa: E731
    elif name == "focal":
        fn = lambda s, y: focal_loss(s, y, params.focal_gamma)  # noqa: E731
    elif name == "dice":
        fn = lambda s, y: dice_loss(s, y, params.dice_smooth, weights)  # noqa: E731
    elif name == "tversky":
        fn = lambda s, y: tversky_loss(  # noqa: E731
            s, y, params.tversky_alpha, params.tversky_beta, params.dice_smooth, weights
        )
    elif name == "lovasz":
        fn = lovasz_softmax_loss
    elif name == "mc":
        off = need_offsets()
        fn = lambda s, y: mc_loss(s, y, off)  # noqa: E731
    elif name in ("mc+dice", "mc+tversky"):
        return combine(make_loss("mc", offsets, params), make_loss(name[3:], offsets, params), mix)
    else:
        raise ValueError(f"unknown loss '{name}'; choose from {', '.join(LOSS_NAMES)}")
    fn.__name__ = name
    return fn
