"""Motion files, preprocessing, normalization, clip sampling and synthetic data."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import Skeleton

STD_FLOOR = 1e-6
TARGET_FPS = 25


class MotionFormatError(ValueError):
    """Malformed or inconsistent motion file."""


class UnsupportedRateError(ValueError):
    pass


@dataclass
class MotionFile:
    skeleton: Skeleton
    fps: float
    frames: np.ndarray  # (T, n_joint, 3) exponential coordinates
    root_translation: np.ndarray | None = None  # (T, 3), dropped by preprocess
    label: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.fps <= 0:
            raise MotionFormatError(f"fps must be positive, got {self.fps}")
        J = self.skeleton.n_joint
        if self.frames.ndim != 3 or self.frames.shape[1:] != (J, 3):
            raise MotionFormatError(
                f"frames have shape {self.frames.shape}, expected (T, {J}, 3) for this skeleton"
            )
        if not np.all(np.isfinite(self.frames)):
            raise MotionFormatError("frames contain non-finite values")
        if self.root_translation is not None:
            self.root_translation = np.asarray(self.root_translation, dtype=float)
            if self.root_translation.shape != (len(self.frames), 3):
                raise MotionFormatError(
                    f"root_translation has shape {self.root_translation.shape}, "
                    f"expected ({len(self.frames)}, 3)"
                )

    def __len__(self):
        return len(self.frames)

    def to_dict(self) -> dict:
        d = {"skeleton": self.skeleton.to_dict(), "fps": self.fps, "frames": self.frames.tolist()}
        if self.root_translation is not None:
            d["root_translation"] = self.root_translation.tolist()
        if self.label is not None:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MotionFile":
        for key in ("skeleton", "fps", "frames"):
            if key not in d:
                raise MotionFormatError(f"missing field '{key}'")
        try:
            skel = Skeleton.from_dict(d["skeleton"])
        except (ValueError, TypeError) as e:
            raise MotionFormatError(f"field 'skeleton': {e}") from None
        try:
            frames = np.asarray(d["frames"], dtype=float)
        except (ValueError, TypeError) as e:
            raise MotionFormatError(f"field 'frames': {e}") from None
        return cls(skel, d["fps"], frames, d.get("root_translation"), d.get("label"))

    def __eq__(self, other):
        if not isinstance(other, MotionFile):
            return NotImplemented
        rt_eq = (self.root_translation is None and other.root_translation is None) or (
            self.root_translation is not None
            and other.root_translation is not None
            and np.array_equal(self.root_translation, other.root_translation)
        )
        return (
            self.skeleton == other.skeleton
            and self.fps == other.fps
            and np.array_equal(self.frames, other.frames)
            and rt_eq
            and self.label == other.label
        )


def motion_to_json(m: MotionFile) -> str:
    return json.dumps(m.to_dict())


def save_motion(m: MotionFile, path) -> None:
    Path(path).write_text(motion_to_json(m))


def load_motion(path) -> MotionFile:
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise MotionFormatError(f"{path}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise MotionFormatError(f"{path}: top level must be an object")
    try:
        return MotionFile.from_dict(d)
    except MotionFormatError as e:
        raise MotionFormatError(f"{path}: {e}") from None


def preprocess(m: MotionFile, target_fps: float = TARGET_FPS, skeleton: Skeleton | None = None) -> MotionFile:
    """Decimate to ``target_fps`` and drop the root translation track."""
    if skeleton is not None and m.skeleton.n_joint != skeleton.n_joint:
        raise MotionFormatError(
            f"motion has {m.skeleton.n_joint} joints, configured skeleton has {skeleton.n_joint}"
        )
    ratio = m.fps / target_fps
    step = int(round(ratio))
    if m.fps < target_fps or abs(ratio - step) > 1e-9:
        raise UnsupportedRateError(f"cannot decimate {m.fps} Hz to {target_fps} Hz (non-integer ratio {ratio:g})")
    return MotionFile(m.skeleton, target_fps, m.frames[::step].copy(), None, m.label)


@dataclass
class NormStats:
    mean: np.ndarray  # (3 * n_joint,)
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.maximum(np.asarray(self.std, dtype=float), STD_FLOOR)

    @classmethod
    def identity(cls, n_joint: int) -> "NormStats":
        return cls(np.zeros(3 * n_joint), np.ones(3 * n_joint))

    def apply(self, motion: np.ndarray) -> np.ndarray:
        """(..., n_joint, 3) radians -> same shape, z-scored per dimension."""
        shape = np.shape(motion)
        flat = np.reshape(motion, shape[:-2] + (-1,))
        return np.reshape((flat - self.mean) / self.std, shape)

    def invert(self, motion: np.ndarray) -> np.ndarray:
        shape = np.shape(motion)
        flat = np.reshape(motion, shape[:-2] + (-1,))
        return np.reshape(flat * self.std + self.mean, shape)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(d["mean"], d["std"])


def fit_normalization(train) -> NormStats:
    """Per-dimension mean/std over every frame of the training motions."""
    arrays = [m.frames if isinstance(m, MotionFile) else np.asarray(m) for m in train]
    if not arrays:
        raise ValueError("cannot fit normalization on an empty training set")
    flat = np.concatenate([a.reshape(-1, a.shape[-2] * 3) for a in arrays], axis=0)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    # summation rounding can put the mean of a constant column one ulp off
    mean = np.where(lo == hi, lo, flat.mean(axis=0))
    return NormStats(mean, flat.std(axis=0))


def sample_clip(m: MotionFile, delta_t: int, rng: np.random.Generator) -> np.ndarray | None:
    """Random window of ``delta_t`` frames, or None when the file is too short."""
    T = len(m.frames)
    if T < delta_t:
        return None
    start = int(rng.integers(0, T - delta_t + 1))
    return m.frames[start:start + delta_t].copy()


def corrupt_zero_joints(motion: np.ndarray, p: float = 0.5, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zero each (frame, joint) exponential coordinate independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    motion = np.asarray(motion, dtype=float)
    if rng is None:
        rng = np.random.default_rng()
    drop = rng.random(motion.shape[:-1]) < p
    out = motion.copy()
    out[drop] = 0.0
    return out


# name, base frequency in Hz
MOTION_CLASSES = (("sway", 0.5), ("swing", 1.25), ("twist", 2.5))
MAX_AMPLITUDE = 1.2


def generate_synthetic(
    skel: Skeleton,
    n_clips: int,
    delta_t: int,
    seed: int = 0,
    fps: float = TARGET_FPS,
    with_root_translation: bool = True,
) -> list:
    """Procedural sinusoidal motions, one class per clip in round-robin order.

    Each joint follows ``c + a * sin(2 pi f t + phi)`` with ``|c| <= 0.3`` and
    ``|a| <= 0.9`` so every exponential coordinate stays within 1.2 rad.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be at least 1")
    J = skel.n_joint
    t = np.arange(delta_t) / fps
    clips = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        name, base_f = MOTION_CLASSES[i % len(MOTION_CLASSES)]
        f = base_f * rng.uniform(0.9, 1.1)
        direction = rng.normal(size=(J, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        amp = direction * rng.uniform(0.3, 0.9, size=(J, 1))
        centre = rng.normal(size=(J, 3))
        centre *= rng.uniform(0.0, 0.3, size=(J, 1)) / np.linalg.norm(centre, axis=1, keepdims=True)
        phase = rng.uniform(0, 2 * np.pi, size=(J, 1))
        frames = centre[None] + amp[None] * np.sin(2 * np.pi * f * t[:, None, None] + phase[None])
        root = None
        if with_root_translation:
            root = np.stack([0.3 * t, 0.9 + 0.02 * np.sin(2 * np.pi * f * t), 0.1 * t], axis=1)
        clips.append(MotionFile(skel, fps, frames, root, label=name))
    return clips


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        overlap = set(map(str, self.train)) & set(map(str, self.test))
        if overlap:
            raise ValueError(f"train and test splits overlap: {sorted(overlap)}")


def write_manifest(split: DatasetSplit, path) -> None:
    """Manifest lines are ``<split>\\t<path>``, paths relative to the manifest's directory."""
    lines = [f"train\t{p}" for p in split.train] + [f"test\t{p}" for p in split.test]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetSplit:
    path = Path(path)
    train, test = [], []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in ("train", "test"):
            raise MotionFormatError(f"{path}:{n}: expected '<train|test>\\t<path>', got {line!r}")
        target = path.parent / parts[1]
        (train if parts[0] == "train" else test).append(target)
    return DatasetSplit(train, test)
