"""Raster containers and their on-disk formats.

Mask files carry an ASCII header ``MSK1 <h> <w> <c>\\n`` followed by ``h*w``
uint8 class indices. Score files carry ``SCR1 <h> <w> <c>\\n`` followed by
``h*w*c`` little-endian float32 values, pixel-major. Internally everything is
float64; only the file payload is float32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_MAGIC = "MSK1"
SCORE_MAGIC = "SCR1"
MAX_CLASSES = 256


class FormatError(ValueError):
    """Base class for malformed raster files."""


class HeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ClassRangeError(FormatError):
    """A mask pixel holds a class index >= the declared class count."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LabelMask:
    height: int
    width: int
    classes: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.classes < 2 or self.classes > MAX_CLASSES:
            raise ValueError(f"classes must be in [2, {MAX_CLASSES}], got {self.classes}")
        if data.size != self.height * self.width:
            raise ShapeError(
                f"mask payload has {data.size} values, expected {self.height}x{self.width}"
            )
        data = data.reshape(self.height, self.width).astype(np.int64)
        if data.size and (data.min() < 0 or data.max() >= self.classes):
            bad = int(data.max()) if data.max() >= self.classes else int(data.min())
            raise ClassRangeError(f"class index {bad} outside [0, {self.classes - 1}]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


# argmax output has the same layout and invariants as a ground-truth mask
PredMask = LabelMask


@dataclass(frozen=True)
class ScoreMap:
    height: int
    width: int
    classes: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if data.size != self.height * self.width * self.classes:
            raise ShapeError(
                f"score payload has {data.size} values, "
                f"expected {self.height}x{self.width}x{self.classes}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("score map contains non-finite values")
        data = data.reshape(self.height, self.width, self.classes).copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        """Scores as a ``(pixels, classes)`` array."""
        return self.data.reshape(-1, self.classes)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[tuple[Path, Path], ...]
    classes: int
    pixels_per_image: int

    def __post_init__(self):
        if not self.entries:
            raise ValueError("manifest has no entries")

    def __len__(self):
        return len(self.entries)

    def masks(self):
        for _, mask_path in self.entries:
            yield load_mask(mask_path, self.classes)


def argmax_predict(scores: ScoreMap | np.ndarray) -> LabelMask | np.ndarray:
    """Per-pixel argmax; exact ties go to the lowest class index.

    Accepts a :class:`ScoreMap` (returns a mask) or a raw ``(..., c)`` array
    (returns an integer array of shape ``(...)``).
    """
    if isinstance(scores, ScoreMap):
        pred = np.argmax(scores.data, axis=-1)
        return LabelMask(scores.height, scores.width, max(scores.classes, 2), pred)
    return np.argmax(np.asarray(scores), axis=-1)


def _read_header(raw: bytes, magic: str) -> tuple[tuple[int, int, int], int]:
    end = raw.find(b"\n")
    if end < 0 or end > 128:
        raise HeaderError("missing header line")
    try:
        parts = raw[:end].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise HeaderError("header is not ASCII") from exc
    if len(parts) != 4 or parts[0] != magic:
        raise HeaderError(f"expected '{magic} <h> <w> <c>', got {raw[:end]!r}")
    try:
        h, w, c = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise HeaderError(f"non-integer dimension in header {raw[:end]!r}") from exc
    if h < 0 or w < 0 or c < 1:
        raise HeaderError(f"invalid dimensions in header {raw[:end]!r}")
    return (h, w, c), end + 1


def load_mask(path: str | os.PathLike, classes: int | None = None) -> LabelMask:
    """Read a ``MSK1`` file.

    ``classes`` overrides the class count declared in the header when given;
    pixels at or above it raise :class:`ClassRangeError`.
    """
    raw = Path(path).read_bytes()
    (h, w, c), offset = _read_header(raw, MASK_MAGIC)
    if c > MAX_CLASSES:
        raise HeaderError(f"class count {c} exceeds {MAX_CLASSES}")
    payload = raw[offset:]
    if len(payload) < h * w:
        raise TruncatedPayloadError(f"{path}: {len(payload)} payload bytes, expected {h * w}")
    if len(payload) > h * w:
        raise HeaderError(f"{path}: {len(payload) - h * w} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=np.uint8)
    return LabelMask(h, w, classes if classes is not None else c, data)


def save_mask(mask: LabelMask, path: str | os.PathLike) -> None:
    if mask.pixels == 0:
        raise ShapeError("refusing to write an empty mask")
    header = f"{MASK_MAGIC} {mask.height} {mask.width} {mask.classes}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mask.data.astype(np.uint8).tobytes())


def load_scores(path: str | os.PathLike) -> ScoreMap:
    raw = Path(path).read_bytes()
    (h, w, c), offset = _read_header(raw, SCORE_MAGIC)
    payload = raw[offset:]
    expected = h * w * c * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: {len(payload)} payload bytes, expected {expected}")
    if len(payload) > expected:
        raise HeaderError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return ScoreMap(h, w, c, data)


def save_scores(scores: ScoreMap, path: str | os.PathLike) -> None:
    """Write a ``SCR1`` file. Values are stored as float32."""
    if scores.pixels == 0:
        raise ShapeError("refusing to write a score map with an empty dimension")
    header = f"{SCORE_MAGIC} {scores.height} {scores.width} {scores.classes}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(scores.data.astype("<f4").tobytes())


def load_manifest(path: str | os.PathLike, classes: int | None = None) -> DatasetManifest:
    """Parse a tab-separated ``scores_path<TAB>mask_path`` manifest.

    Relative paths resolve against the manifest's directory. The class count
    and pixels per image come from the first mask unless ``classes`` is given;
    every mask must agree.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'scores<TAB>mask'")
        entries.append(tuple(base / p if not Path(p).is_absolute() else Path(p) for p in parts))
    if not entries:
        raise ValueError(f"{path}: manifest has no entries")

    first = load_mask(entries[0][1], classes)
    c = classes if classes is not None else first.classes
    m = first.pixels
    for _, mask_path in entries[1:]:
        mask_raw = Path(mask_path).read_bytes()
        (h, w, mc), _ = _read_header(mask_raw, MASK_MAGIC)
        if h * w != m or (classes is None and mc != c):
            raise FormatError(f"{mask_path}: shape/classes disagree with {entries[0][1]}")
    return DatasetManifest(tuple(entries), c, m)


def save_manifest(entries, path: str | os.PathLike) -> None:
    path = Path(path)
    lines = ["# scores_path\tmask_path"]
    for scores_path, mask_path in entries:
        lines.append(f"{_relative(scores_path, path.parent)}\t{_relative(mask_path, path.parent)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)
