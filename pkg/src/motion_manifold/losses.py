"""Reconstruction, manifold, MMD and least-squares adversarial losses.

Each loss accepts autodiff Vars (and returns a Var) or plain arrays (and
returns a float).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kinematics import Skeleton, fk_backward, fk_forward


@dataclass(frozen=True)
class LossWeights:
    w_p: float = 5.0
    lambda_M: float = 0.001
    lambda_W: float = 0.1
    lambda_G: float = 0.001

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass(frozen=True)
class KernelConfig:
    C: float

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"kernel scale C must be positive, got {self.C}")

    @classmethod
    def for_latent(cls, d_m: int, sigma_z_sq: float = 1.0) -> "KernelConfig":
        return cls(2.0 * d_m * sigma_z_sq)


def _lift(*xs):
    """Put array arguments on a common tape; report whether the caller passed Vars."""
    tape = next((x.tape for x in xs if isinstance(x, ad.Var)), None)
    symbolic = tape is not None
    tape = tape or ad.Tape()
    out = [x if isinstance(x, ad.Var) or x is None else tape.constant(np.asarray(x, dtype=float)) for x in xs]
    return symbolic, out


def _finish(symbolic, var):
    return var if symbolic else float(var.value)


def fk_positions(pose: ad.Var, skel: Skeleton) -> ad.Var:
    """Differentiable forward kinematics on a (..., n_joint, 3) Var."""
    pv = pose.value
    return pose.tape.record("fk", (pose,), fk_forward(skel, pv), lambda g: (fk_backward(skel, pv, g),))


def per_frame_angle_error(target, rec) -> np.ndarray:
    """Sum over joints of the Euclidean exp-coordinate error, shape (..., T)."""
    return np.linalg.norm(np.asarray(rec) - np.asarray(target), axis=-1).sum(axis=-1)


def per_frame_position_error(target, rec, skel: Skeleton) -> np.ndarray:
    return np.linalg.norm(fk_forward(skel, rec) - fk_forward(skel, target), axis=-1).sum(axis=-1)


def _frame_sum_mean(target: ad.Var, rec: ad.Var) -> ad.Var:
    if target.shape != rec.shape:
        raise ad.ShapeError(f"reconstruction shape {rec.shape} != target shape {target.shape}")
    per_joint = ad.norm(rec - target, axis=-1)
    n_frames = int(np.prod(per_joint.shape[:-1]))
    return ad.scale(ad.sum(per_joint), 1.0 / n_frames)


def motion_reconstruction_loss(target, rec_rot, rec_vel, skel: Skeleton | None,
                               weights: LossWeights = LossWeights()) -> dict:
    """``{"L_R", "L_ang", "L_pos"}`` for motions shaped (..., T, n_joint, 3) in radians.

    Errors are summed over joints and averaged over frames and batch. Pass
    ``rec_vel=None`` for a single-decoder model and ``skel=None`` to skip the
    position term.
    """
    symbolic, (target, rec_rot, rec_vel) = _lift(target, rec_rot, rec_vel)
    recs = [r for r in (rec_rot, rec_vel) if r is not None]
    L_ang = _frame_sum_mean(target, recs[0])
    for r in recs[1:]:
        L_ang = L_ang + _frame_sum_mean(target, r)
    if skel is None:
        L_pos = target.tape.constant(np.zeros(()))
    else:
        p_target = target.tape.constant(fk_forward(skel, target.value))
        L_pos = _frame_sum_mean(p_target, fk_positions(recs[0], skel))
        for r in recs[1:]:
            L_pos = L_pos + _frame_sum_mean(p_target, fk_positions(r, skel))
    L_R = L_ang + ad.scale(L_pos, weights.w_p)
    return {k: _finish(symbolic, v) for k, v in (("L_R", L_R), ("L_ang", L_ang), ("L_pos", L_pos))}


def manifold_reconstruction_loss(z, z_hat_rot, z_hat_vel=None):
    """Batch mean of ``|z_rot - z|_1 + |z_vel - z|_1``."""
    symbolic, (z, zr, zv) = _lift(z, z_hat_rot, z_hat_vel)
    total = None
    for zh in (zr, zv):
        if zh is None:
            continue
        if zh.shape != z.shape:
            raise ad.ShapeError(f"manifold loss: {zh.shape} != {z.shape}")
        term = ad.sum(ad.abs(zh - z))
        total = term if total is None else total + term
    batch = z.shape[0] if z.ndim == 2 else 1
    return _finish(symbolic, ad.scale(total, 1.0 / batch))


def imq_kernel(x: ad.Var, y: ad.Var, C: float) -> ad.Var:
    """Inverse multiquadric kernel matrix C / (C + |x_i - y_j|^2)."""
    return ad.scale(ad.reciprocal(ad.pairwise_sqdist(x, y) + C), C)


def mmd_loss(z_batch, prior_batch, kernel: KernelConfig, biased: bool = False):
    """Kernel MMD^2 estimate between encoded codes and prior samples."""
    symbolic, (z, p) = _lift(z_batch, prior_batch)
    n, m = z.shape[0], p.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"MMD needs at least 2 samples per batch, got {n} and {m}")
    if z.shape[1] != p.shape[1]:
        raise ad.ShapeError(f"MMD: code dim {z.shape[1]} != prior dim {p.shape[1]}")
    kzz = ad.sum(imq_kernel(z, z, kernel.C))
    kpp = ad.sum(imq_kernel(p, p, kernel.C))
    kzp = ad.sum(imq_kernel(z, p, kernel.C))
    if biased:
        out = ad.scale(kzz, 1.0 / n**2) + ad.scale(kpp, 1.0 / m**2) - ad.scale(kzp, 2.0 / (n * m))
    else:
        # diagonal kernel entries are exactly 1
        out = (ad.scale(kzz - float(n), 1.0 / (n * (n - 1)))
               + ad.scale(kpp - float(m), 1.0 / (m * (m - 1)))
               - ad.scale(kzp, 2.0 / (n * m)))
    return _finish(symbolic, out)


def l2_latent_penalty(z):
    """Batch mean of |z|^2; a baseline alternative to the MMD regularizer."""
    symbolic, (z,) = _lift(z)
    return _finish(symbolic, ad.scale(ad.sum_sq(z), 1.0 / z.shape[0]))


def lsgan_losses(real_scores, fake_scores):
    """``(L_D, L_G)``; ``fake_scores`` may be a list, one score map per decoder."""
    fakes = list(fake_scores) if isinstance(fake_scores, (list, tuple)) else [fake_scores]
    symbolic, lifted = _lift(real_scores, *fakes)
    real, fakes = lifted[0], lifted[1:]
    real = ad.reshape(real, (-1,))
    fake = ad.concat([ad.reshape(f, (-1,)) for f in fakes], axis=0) if len(fakes) > 1 \
        else ad.reshape(fakes[0], (-1,))
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("lsgan_losses needs non-empty score maps")
    L_D = ad.scale(ad.mean(fake * fake), 0.5) + ad.scale(ad.mean((real - 1.0) * (real - 1.0)), 0.5)
    L_G = ad.scale(ad.mean((fake - 1.0) * (fake - 1.0)), 0.5)
    return _finish(symbolic, L_D), _finish(symbolic, L_G)


def lsgan_generator_loss(fake_scores):
    """Generator half of :func:`lsgan_losses`, without needing real scores."""
    fakes = list(fake_scores) if isinstance(fake_scores, (list, tuple)) else [fake_scores]
    symbolic, fakes = _lift(*fakes)
    fake = ad.concat([ad.reshape(f, (-1,)) for f in fakes], axis=0) if len(fakes) > 1 \
        else ad.reshape(fakes[0], (-1,))
    return _finish(symbolic, ad.scale(ad.mean((fake - 1.0) * (fake - 1.0)), 0.5))


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Generator objective from ``parts`` (missing terms count as zero)."""
    L = parts["L_R"]
    for key, lam in (("L_M", weights.lambda_M), ("L_W", weights.lambda_W), ("L_G", weights.lambda_G)):
        term = parts.get(key)
        if term is None or lam == 0:
            continue
        L = L + (ad.scale(term, lam) if isinstance(term, ad.Var) else lam * term)
    return L


def discriminator_objective(L_D, weights: LossWeights = LossWeights()):
    return ad.scale(L_D, weights.lambda_G) if isinstance(L_D, ad.Var) else weights.lambda_G * L_D
