"""Pixel classifiers with hand-written backpropagation and an AdamW loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibConfig, MarginOffsets, class_stats, compute_offsets
from .core import ShapeError
from .losses import BaselineParams, LossFn, LossResult, make_loss
from .metrics import ConfusionMatrix, accumulate, report
from .synth import SynthData

log = logging.getLogger(__name__)

PARAM_ORDER = {
    "linear": ("W", "b"),
    "mlp1": ("W1", "b1", "W2", "b2"),
}


class TrainingAbort(RuntimeError):
    """Raised when a loss or parameter turns non-finite."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class Model:
    kind: str
    params: dict[str, np.ndarray]
    dims: tuple[int, int, int]  # (d, hidden, c); hidden is 0 for linear

    def copy(self) -> "Model":
        return Model(self.kind, {k: v.copy() for k, v in self.params.items()}, self.dims)

    @property
    def classes(self) -> int:
        return self.dims[2]


def init_model(kind: str, d: int, c: int, hidden: int = 16, seed: int = 0) -> Model:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization for weights and biases."""
    rng = np.random.default_rng(seed)

    def u(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if kind == "linear":
        return Model(kind, {"W": u(d, (d, c)), "b": u(d, (c,))}, (d, 0, c))
    if kind == "mlp1":
        params = {"W1": u(d, (d, hidden)), "b1": u(d, (hidden,)),
                  "W2": u(hidden, (hidden, c)), "b2": u(hidden, (c,))}
        return Model(kind, params, (d, hidden, c))
    raise ValueError(f"unknown model kind {kind!r}")


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Scores ``(..., c)`` for features ``(..., d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dims[0]:
        raise ShapeError(f"features have {x.shape[-1]} channels, model expects {model.dims[0]}")
    p = model.params
    if model.kind == "linear":
        return x @ p["W"] + p["b"]
    hidden = np.tanh(x @ p["W1"] + p["b1"])
    return hidden @ p["W2"] + p["b2"]


def backward(model: Model, x: np.ndarray, labels: np.ndarray, loss_fn: LossFn) -> tuple[LossResult, dict]:
    """Loss at the current parameters and its gradient for every parameter block."""
    _, res, grads = _forward_backward(model, x, labels, loss_fn)
    return res, grads


def _forward_backward(model: Model, x, labels, loss_fn: LossFn):
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.dims[0])
    labels = np.asarray(labels).reshape(-1)
    p = model.params
    if model.kind == "linear":
        scores = x @ p["W"] + p["b"]
        res = loss_fn(scores, labels)
        g = res.gradient
        return scores, res, {"W": x.T @ g, "b": g.sum(axis=0)}
    hidden = np.tanh(x @ p["W1"] + p["b1"])
    scores = hidden @ p["W2"] + p["b2"]
    res = loss_fn(scores, labels)
    g = res.gradient
    g_hidden = (g @ p["W2"].T) * (1.0 - hidden**2)
    grads = {"W2": hidden.T @ g, "b2": g.sum(axis=0), "W1": x.T @ g_hidden, "b1": g_hidden.sum(axis=0)}
    return scores, res, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs. ``warmup_epochs=None`` means 20% of ``epochs``."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_images: int = 1
    epochs: int = 100
    warmup_epochs: int | None = None
    seed: int = 0
    loss: str = "ce"
    baseline: BaselineParams = field(default_factory=BaselineParams)
    calib: CalibConfig = field(default_factory=CalibConfig)
    mix: float = 0.5
    model_kind: str = "linear"
    hidden: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_images < 1 or self.epochs < 0:
            raise ValueError("batch_images must be >= 1 and epochs >= 0")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @property
    def warmup(self) -> int:
        if self.warmup_epochs is None:
            return int(round(0.2 * self.epochs))
        return min(self.warmup_epochs, self.epochs)


def step(model: Model, grads: dict, config: TrainConfig, state: AdamState) -> tuple[Model, AdamState]:
    """One AdamW update; weight decay shrinks parameters directly, not through the gradient."""
    t = state.step + 1
    lr = config.learning_rate
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, w in model.params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = w * (1 - lr * config.weight_decay)
        new_params[name] = w - lr * m_hat / (np.sqrt(v_hat) + config.eps_adam)
        new_m[name], new_v[name] = m, v
    return Model(model.kind, new_params, model.dims), AdamState(t, new_m, new_v)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_miou: float
    val_miou: float
    phase: str


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "train_miou", "val_miou", "phase"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_miou),
                        repr(r.val_miou), r.phase])
        return buf.getvalue()


def _flat(data: SynthData) -> tuple[np.ndarray, np.ndarray]:
    d = data.features.shape[-1]
    return data.features.reshape(-1, d), data.masks.reshape(-1)


def confusion(model: Model, data: SynthData) -> ConfusionMatrix:
    x, y = _flat(data)
    pred = np.argmax(forward(model, x), axis=1)
    return accumulate(ConfusionMatrix(data.classes), y, pred)


def evaluate(model: Model, data: SynthData):
    """Dataset-global metric report for ``model`` on ``data``."""
    return report(confusion(model, data))


def build_loss(config: TrainConfig, offsets: MarginOffsets | None) -> LossFn:
    return make_loss(config.loss, offsets, config.baseline, config.mix)


def train(
    train_data: SynthData,
    val_data: SynthData,
    config: TrainConfig,
    offsets: MarginOffsets | None = None,
) -> tuple[Model, TrainLog]:
    """Cross-entropy warm-up followed by the configured loss.

    Offsets default to the calibration of ``train_data``'s label statistics.
    Shuffling for epoch ``e`` uses its own stream seeded by ``(seed, e)``.
    """
    c = train_data.classes
    d = train_data.features.shape[-1]
    model = init_model(config.model_kind, d, c, config.hidden, config.seed)
    log_ = TrainLog()
    if config.epochs == 0:
        return model, log_

    if offsets is None and config.loss.startswith("mc"):
        offsets = compute_offsets(class_stats(list(train_data.masks), classes=c), config.calib)
    target_loss = build_loss(config, offsets)
    warm_loss = make_loss("ce", params=config.baseline)
    n_img = len(train_data)
    xv, yv = _flat(val_data)
    state = AdamState()

    for epoch in range(config.epochs):
        warm = epoch < config.warmup
        loss_fn = warm_loss if warm else target_loss
        order = np.random.default_rng([config.seed, epoch]).permutation(n_img)
        train_cm = ConfusionMatrix(c)
        loss_sum = 0.0
        pixels = 0
        for b, start in enumerate(range(0, n_img, config.batch_images)):
            idx = np.sort(order[start:start + config.batch_images])
            y = train_data.masks[idx].reshape(-1)
            scores, res, grads = _forward_backward(model, train_data.features[idx], y, loss_fn)
            if not math.isfinite(res.value):
                raise TrainingAbort("non-finite loss", epoch, b)
            # pixel-weighted running mean over the epoch's batches, taken before each update
            loss_sum += res.value * y.size
            pixels += y.size
            train_cm = accumulate(train_cm, y, np.argmax(scores, axis=1))
            model, state = step(model, grads, config, state)
            if not all(np.all(np.isfinite(w)) for w in model.params.values()):
                raise TrainingAbort("non-finite parameters", epoch, b)

        sv = forward(model, xv)
        rec = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / pixels,
            val_loss=loss_fn(sv, yv).value,
            train_miou=report(train_cm).miou,
            val_miou=report(accumulate(ConfusionMatrix(c), yv, np.argmax(sv, axis=1))).miou,
            phase="warmup" if warm else config.loss,
        )
        if not math.isfinite(rec.val_loss):
            raise TrainingAbort("non-finite validation loss", epoch, -1)
        log_.records.append(rec)
        log.debug("epoch %d %s", epoch + 1, rec)
    return model, log_


# --- checkpoints -------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """``MDL1 <kind> <d> <hidden> <c>`` header, then float64 parameter blocks in fixed order."""
    d, h, c = model.dims
    with open(path, "wb") as fh:
        fh.write(f"MDL1 {model.kind} {d} {h} {c}\n".encode("ascii"))
        for name in PARAM_ORDER[model.kind]:
            fh.write(model.params[name].astype("<f8").tobytes())


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    parts = raw[:end].decode("ascii").split() if end > 0 else []
    if len(parts) != 5 or parts[0] != "MDL1" or parts[1] not in PARAM_ORDER:
        raise ValueError(f"{path}: not an MDL1 checkpoint")
    kind = parts[1]
    d, h, c = (int(v) for v in parts[2:])
    template = init_model(kind, d, c, h)
    params = {}
    offset = end + 1
    for name in PARAM_ORDER[kind]:
        shape = template.params[name].shape
        size = int(np.prod(shape)) * 8
        block = raw[offset:offset + size]
        if len(block) != size:
            raise ValueError(f"{path}: truncated parameter block {name}")
        params[name] = np.frombuffer(block, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return Model(kind, params, (d, h, c))

