"""Feature-matrix files: the inference input and calibration data format.

Binary layout, little-endian:

    uint32   frame count
    uint32   feature width
    float64  frame duration in seconds
    float32  frames x width values, row-major
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ValidationError

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<IId")
FEATURE_SUFFIX = ".feat"
TEXT_SUFFIX = ".txt"
DEFAULT_FRAME_DURATION = 0.01


@dataclass(frozen=True, eq=False)
class Utterance:
    features: np.ndarray
    frame_duration: float = DEFAULT_FRAME_DURATION
    id: str | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValidationError(f"features must be frames x width, got shape {self.features.shape}")
        if not self.frame_duration > 0:
            raise ValidationError(f"frame duration must be positive, got {self.frame_duration}")
        if not np.all(np.isfinite(self.features)):
            frame = int(np.argwhere(~np.isfinite(self.features))[0][0])
            raise ValidationError(f"non-finite feature in frame {frame}" + (f" of {self.id}" if self.id else ""))

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        return self.frames * self.frame_duration


def write_features(path: str | Path, u: Utterance) -> None:
    data = np.ascontiguousarray(u.features, dtype="<f4")
    Path(path).write_bytes(HEADER.pack(u.frames, u.width, u.frame_duration) + data.tobytes())


def read_features(path: str | Path) -> Utterance:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise ModelFormatError(f"{path}: too short for a feature header ({len(raw)} bytes)")
    frames, width, frame_duration = HEADER.unpack_from(raw)
    expected = HEADER.size + frames * width * 4
    if len(raw) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes for {frames}x{width} frames, found {len(raw)}")
    features = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(frames, width)
    return Utterance(features.astype(np.float32), frame_duration, path.stem)


def import_text(path: str | Path, frame_duration: float = DEFAULT_FRAME_DURATION) -> Utterance:
    """Whitespace-separated matrix, one frame per line."""
    path = Path(path)
    try:
        features = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ValidationError(f"{path}: not a numeric matrix", [str(e)]) from e
    return Utterance(features.astype(np.float32), frame_duration, path.stem)


def load_utterance(path: str | Path, frame_duration: float = DEFAULT_FRAME_DURATION) -> Utterance:
    path = Path(path)
    if path.suffix == TEXT_SUFFIX:
        return import_text(path, frame_duration)
    return read_features(path)


def load_dataset(source: str | Path, frame_duration: float = DEFAULT_FRAME_DURATION) -> list[Utterance]:
    """A single feature file, or every .feat/.txt file of a directory in name order."""
    source = Path(source)
    if not source.exists():
        raise ValidationError(f"{source}: no such file or directory")
    if source.is_file():
        return [load_utterance(source, frame_duration)]
    paths = sorted(p for p in source.iterdir() if p.suffix in (FEATURE_SUFFIX, TEXT_SUFFIX))
    if not paths:
        raise ValidationError(f"{source}: no {FEATURE_SUFFIX} or {TEXT_SUFFIX} files")
    logger.info("loading %d utterances from %s", len(paths), source)
    return [load_utterance(p, frame_duration) for p in paths]


def synthetic_utterance(
    rng: np.random.Generator,
    frames: int,
    width: int,
    frame_duration: float = DEFAULT_FRAME_DURATION,
    id: str | None = None,
) -> Utterance:
    return Utterance(rng.standard_normal((frames, width)).astype(np.float32), frame_duration, id)
