"""Manifold operations (sampling, interpolation, denoising, analogy) and error metrics.

Motions here are in radians, shaped (T, n_joint, 3). Each motion is pushed
through the network on its own so results never depend on batch composition.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MotionFile, NormStats, sample_clip, save_motion
from .kinematics import Skeleton
from .losses import per_frame_angle_error, per_frame_position_error
from .model import ModelParams, decode_rotation, decode_velocity, encode, load_checkpoint

N_INTERVALS = 5
DECODERS = ("rot", "vel")


@dataclass
class Reconstruction:
    rot: np.ndarray
    vel: np.ndarray | None
    z: np.ndarray
    z_rot: np.ndarray
    z_vel: np.ndarray | None


@dataclass
class ManifoldModel:
    """Trained parameters bundled with the normalization and skeleton they were trained with."""

    params: ModelParams
    stats: NormStats
    skeleton: Skeleton
    name: str = ""

    @classmethod
    def from_checkpoint(cls, path) -> "ManifoldModel":
        params, meta, _ = load_checkpoint(path)
        if "stats" not in meta or "skeleton" not in meta:
            raise ValueError(f"{path}: checkpoint lacks normalization statistics or skeleton")
        return cls(params, NormStats.from_dict(meta["stats"]), Skeleton.from_dict(meta["skeleton"]), str(path))

    @property
    def hyper(self):
        return self.params.hyper

    def encode(self, motion) -> np.ndarray:
        return encode(self.stats.apply(np.asarray(motion, dtype=float)), self.params)

    def decode(self, z, decoder: str = "rot") -> np.ndarray:
        fn = {"rot": decode_rotation, "vel": decode_velocity}[decoder]
        return self.stats.invert(fn(np.asarray(z, dtype=float), self.params).motion)

    def reconstruct(self, motion) -> Reconstruction:
        z = self.encode(motion)
        rot = self.decode(z, "rot")
        vel = self.decode(z, "vel") if self.hyper.flags.velocity_decoder else None
        return Reconstruction(rot, vel, z, self.encode(rot), None if vel is None else self.encode(vel))


def sample_random(n: int, model: ManifoldModel, sigma_z_sq: float | None = None, seed: int = 0,
                  decoder: str = "rot"):
    """Decode ``n`` codes drawn from N(0, sigma_z^2 I); returns ``(motions, codes)``."""
    sigma_z_sq = model.hyper.sigma_z_sq if sigma_z_sq is None else sigma_z_sq
    rng = np.random.default_rng(seed)
    codes = rng.normal(size=(n, model.hyper.d_m)) * np.sqrt(sigma_z_sq)
    return [model.decode(z, decoder) for z in codes], codes


def interpolation_codes(z_a, z_b, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    z_a, z_b = np.asarray(z_a, dtype=float), np.asarray(z_b, dtype=float)
    # this form is exact when z_a == z_b; the endpoints are pinned to the inputs
    codes = np.stack([z_a + a * (z_b - z_a) for a in np.linspace(0.0, 1.0, steps)])
    codes[0], codes[-1] = z_a, z_b
    return codes


def interpolate(motion_a, motion_b, steps: int, model: ManifoldModel, decoder: str = "rot") -> list:
    """Decode evenly spaced points on the segment between the two motions' codes."""
    codes = interpolation_codes(model.encode(motion_a), model.encode(motion_b), steps)
    return [model.decode(z, decoder) for z in codes]


def denoise(motion, model: ManifoldModel, decoder: str = "rot") -> np.ndarray:
    """Project a motion onto the manifold and decode it back."""
    return model.decode(model.encode(motion), decoder)


def analogy_code(z_a, z_b, z_c) -> np.ndarray:
    """Correctly rounded ``z_a - z_b + z_c`` so that cancelling terms vanish exactly."""
    return np.array([math.fsum((a, -b, c)) for a, b, c in zip(z_a, z_b, z_c)])


def analogy(motion_a, motion_b, motion_c, model: ManifoldModel, decoder: str = "rot") -> np.ndarray:
    """Decode ``enc(A) - enc(B) + enc(C)``."""
    z = analogy_code(model.encode(motion_a), model.encode(motion_b), model.encode(motion_c))
    return model.decode(z, decoder)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricReport:
    interval_end_s: np.ndarray
    E_r: dict
    E_p: dict
    E_z: dict
    meta: dict = field(default_factory=dict)

    @property
    def headline_E_z(self) -> float:
        return self.E_z["rot"]

    def rows(self):
        """``(decoder, interval_end_s, E_r, E_p)`` per decoder and interval."""
        for dec in DECODERS:
            if self.E_r.get(dec) is None:
                continue
            for t, er, ep in zip(self.interval_end_s, self.E_r[dec], self.E_p[dec]):
                yield dec, float(t), float(er), float(ep)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["decoder", "interval_end_s", "E_r", "E_p", "E_z"])
            for dec, t, er, ep in self.rows():
                w.writerow([dec, f"{t:g}", repr(er), repr(ep), ""])
            for dec in DECODERS:
                if self.E_z.get(dec) is not None:
                    w.writerow([dec, "summary", "", "", repr(float(self.E_z[dec]))])

    def format_table(self) -> str:
        head = "model   " + "".join(f"{f'{t:.1f}s':>16}" for t in self.interval_end_s) + f"{'E_z':>8}"
        sub = "        " + "".join(f"{'E_r':>8}{'E_p':>8}" for _ in self.interval_end_s)
        lines = [head, sub]
        for dec in DECODERS:
            if self.E_r.get(dec) is None:
                cells = "".join(f"{'-':>8}{'-':>8}" for _ in self.interval_end_s) + f"{'-':>8}"
            else:
                cells = "".join(f"{er:8.3f}{ep:8.3f}" for er, ep in zip(self.E_r[dec], self.E_p[dec]))
                cells += f"{self.E_z[dec]:8.3f}"
            lines.append(f"{dec:<8}{cells}")
        return "\n".join(lines)


def interval_slices(delta_t: int, n: int = N_INTERVALS) -> list:
    return [(int(c[0]), int(c[-1]) + 1) for c in np.array_split(np.arange(delta_t), n)]


def interval_means(per_frame: np.ndarray, n: int = N_INTERVALS) -> np.ndarray:
    """Mean of a (T,) per-frame series over ``n`` consecutive intervals."""
    return np.array([per_frame[a:b].mean() for a, b in interval_slices(len(per_frame), n)])


def _clips(test_set, delta_t, rng):
    out = []
    for m in test_set:
        if isinstance(m, MotionFile):
            clip = sample_clip(m, delta_t, rng)
            if clip is not None:
                out.append(clip)
        else:
            out.append(np.asarray(m, dtype=float))
    return out


def evaluate(test_set, model, n_eval: int = 30, seed: int = 0, fps: float = 25.0,
             skeleton: Skeleton | None = None) -> MetricReport:
    """Per-interval angle/position errors of both decoders and latent reconstruction error.

    ``model`` is anything with ``hyper`` and ``reconstruct(motion)`` (e.g.
    :class:`ManifoldModel`). Errors are summed over joints, averaged over the
    frames of each interval and then over the evaluated motions.
    """
    rng = np.random.default_rng(seed)
    skel = skeleton or model.skeleton
    delta_t = model.hyper.delta_t
    clips = _clips(test_set, delta_t, rng)
    if not clips:
        raise ValueError("evaluation needs a non-empty test set")
    if len(clips) > n_eval:
        pick = np.sort(rng.choice(len(clips), size=n_eval, replace=False))
        clips = [clips[i] for i in pick]

    E_r = {d: [] for d in DECODERS}
    E_p = {d: [] for d in DECODERS}
    E_z = {d: [] for d in DECODERS}
    for clip in clips:
        rec = model.reconstruct(clip)
        for dec, motion, z_hat in (("rot", rec.rot, rec.z_rot), ("vel", rec.vel, rec.z_vel)):
            if motion is None:
                continue
            E_r[dec].append(interval_means(per_frame_angle_error(clip, motion)))
            E_p[dec].append(interval_means(per_frame_position_error(clip, motion, skel)))
            E_z[dec].append(np.abs(z_hat - rec.z).sum())

    def reduce(d):
        return {k: (np.mean(v, axis=0) if v else None) for k, v in d.items()}

    ends = np.array([b for _, b in interval_slices(delta_t)]) / fps
    meta = {
        "variant": model.hyper.variant,
        "checkpoint": getattr(model, "name", ""),
        "n_eval": len(clips),
        "seed": seed,
    }
    E_z_red = {k: (float(np.mean(v)) if v else None) for k, v in E_z.items()}
    return MetricReport(ends, reduce(E_r), reduce(E_p), E_z_red, meta)


def save_motions(motions, skel: Skeleton, out_dir, prefix: str, fps: float = 25.0) -> list:
    """Write motions as ``<prefix>_<k>.json`` files (k from 1); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, m in enumerate(motions, start=1):
        p = out_dir / f"{prefix}_{k:03d}.json"
        save_motion(MotionFile(skel, fps, m), p)
        paths.append(p)
    return paths
