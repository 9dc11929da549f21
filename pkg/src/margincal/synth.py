"""Deterministic synthetic imbalanced segmentation data.

Masks are class-0 background with random axis-aligned rectangles and
ellipses painted for classes 1..c-1. A running per-class tally steers each
image's target area, so dataset-level frequencies track the request. Pixel
features are one-hot class prototypes in ``R^d`` plus isotropic Gaussian noise.

Randomness comes from numpy's PCG64 bit generator. Image ``i`` draws from its
own stream seeded with ``SeedSequence(seed, spawn_key=(i,))``, so images can
be generated independently and in any order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import LabelMask, ScoreMap, save_manifest, save_mask, save_scores

MAX_SHAPE_ATTEMPTS = 200


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    images: int = 300
    height: int = 32
    width: int = 32
    classes: int = 3
    target_frequencies: tuple[float, ...] = (0.89, 0.10, 0.01)
    noise_sigma: float = 1.0
    feature_channels: int = 8

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.target_frequencies)
        object.__setattr__(self, "target_frequencies", freqs)
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if len(freqs) != self.classes:
            raise ValueError("one target frequency per class required")
        if any(f <= 0 for f in freqs) or abs(sum(freqs) - 1.0) > 1e-9:
            raise ValueError("target frequencies must be positive and sum to 1")
        if self.feature_channels < self.classes:
            raise ValueError("feature_channels must be >= classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.images < 1 or self.height < 1 or self.width < 1:
            raise ValueError("images, height and width must be positive")

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        raw = json.loads(Path(path).read_text())
        if "target_frequencies" in raw:
            raw["target_frequencies"] = tuple(raw["target_frequencies"])
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class SynthData:
    features: np.ndarray  # (images, h, w, d) float64
    masks: np.ndarray  # (images, h, w) int64
    classes: int
    spec: SynthSpec | None = field(default=None, repr=False)

    def __len__(self):
        return self.masks.shape[0]

    def subset(self, idx) -> "SynthData":
        return SynthData(self.features[idx], self.masks[idx], self.classes, self.spec)

    def label_masks(self) -> list[LabelMask]:
        h, w = self.masks.shape[1:]
        return [LabelMask(h, w, self.classes, m) for m in self.masks]

    def realized_frequencies(self) -> np.ndarray:
        counts = np.bincount(self.masks.reshape(-1), minlength=self.classes)
        return counts / counts.sum()


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _shape_mask(rng: np.random.Generator, h: int, w: int, area: float) -> np.ndarray:
    """A random rectangle or ellipse of roughly ``area`` pixels."""
    aspect = np.exp(rng.uniform(-0.7, 0.7))
    ellipse = rng.random() < 0.5
    if ellipse:
        # area = pi a b
        b = np.sqrt(max(area, 1.0) / (np.pi * aspect))
        a = aspect * b
        a, b = max(a, 0.5), max(b, 0.5)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        yy, xx = np.ogrid[:h, :w]
        return ((yy + 0.5 - cy) / b) ** 2 + ((xx + 0.5 - cx) / a) ** 2 <= 1.0
    rh = int(np.clip(round(np.sqrt(max(area, 1.0) / aspect)), 1, h))
    rw = int(np.clip(round(max(area, 1.0) / rh), 1, w))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    out = np.zeros((h, w), dtype=bool)
    out[y0:y0 + rh, x0:x0 + rw] = True
    return out


def _paint_image(rng, h: int, w: int, order, targets: np.ndarray) -> np.ndarray:
    """Paint foreground classes over background until each target count is met.

    Shapes only cover background pixels and are rejected when they overshoot
    the remaining target by more than half.
    """
    mask = np.zeros((h, w), dtype=np.int64)
    for k in order:
        want = int(round(targets[k]))
        painted = 0
        attempts = 0
        while painted < want and attempts < MAX_SHAPE_ATTEMPTS:
            attempts += 1
            remaining = want - painted
            area = rng.uniform(0.3, 1.0) * remaining if remaining > 4 else remaining
            shape = _shape_mask(rng, h, w, area) & (mask == 0)
            got = int(shape.sum())
            if got == 0 or got > 1.5 * remaining + 2:
                continue
            mask[shape] = k
            painted += got
        if painted == 0 and want > 0:
            raise InfeasibleSpecError(f"could not place any pixels of class {k}")
    return mask


def generate(spec: SynthSpec) -> SynthData:
    """Build the dataset described by ``spec``; identical specs give identical data."""
    c = spec.classes
    h, w = spec.height, spec.width
    m = h * w
    freqs = np.asarray(spec.target_frequencies)
    if freqs[1:].sum() * m > 0.95 * m:
        raise InfeasibleSpecError("foreground classes cannot cover >95% of every image")
    # paint common foreground classes first so rare classes are not starved of room
    order = [int(k) for k in np.argsort(-freqs[1:], kind="stable") + 1]

    masks = np.empty((spec.images, h, w), dtype=np.int64)
    realized = np.zeros(c)
    for i in range(spec.images):
        rng = _image_rng(spec.seed, i)
        # steer towards the global target: ask for what the running tally lacks,
        # with per-image jitter so images differ in composition
        owed = freqs * m * (i + 1) - realized
        jitter = rng.uniform(0.5, 1.5, size=c)
        targets = np.clip(np.minimum(owed, freqs * m * 3.0) * jitter, 0, None)
        if targets[1:].sum() > 0.95 * m:
            targets[1:] *= 0.95 * m / targets[1:].sum()
        masks[i] = _paint_image(rng, h, w, order, targets)
        realized += np.bincount(masks[i].reshape(-1), minlength=c)

    d = spec.feature_channels
    prototypes = np.eye(c, d)
    features = np.empty((spec.images, h, w, d))
    for i in range(spec.images):
        # separate stream per image for the noise, independent of shape drawing
        rng = _image_rng(spec.seed ^ 0x5EED_F00D, i)
        features[i] = prototypes[masks[i]] + spec.noise_sigma * rng.standard_normal((h, w, d))

    data = SynthData(features, masks, c, spec)
    missing = np.flatnonzero(realized == 0)
    if missing.size:
        raise InfeasibleSpecError(f"classes {missing.tolist()} absent from the generated data")
    return data


def split(data: SynthData, train: int, val: int, test: int) -> tuple[SynthData, SynthData, SynthData]:
    """Consecutive train/val/test image splits."""
    if train + val + test > len(data):
        raise ValueError(f"splits need {train + val + test} images, have {len(data)}")
    a, b = train, train + val
    return data.subset(slice(0, a)), data.subset(slice(a, b)), data.subset(slice(b, b + test))


def write_dataset(data: SynthData, out_dir) -> Path:
    """Write features (SCR1 with c = d), masks (MSK1) and a manifest; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, h, w, d = data.features.shape
    entries = []
    for i in range(n):
        fpath = out / f"img{i:05d}.features.scr"
        mpath = out / f"img{i:05d}.mask.msk"
        save_scores(ScoreMap(h, w, d, data.features[i]), fpath)
        save_mask(LabelMask(h, w, data.classes, data.masks[i]), mpath)
        entries.append((fpath, mpath))
    manifest = out / "manifest.tsv"
    save_manifest(entries, manifest)
    if data.spec is not None:
        (out / "synth_spec.json").write_text(data.spec.to_json())
    return manifest
