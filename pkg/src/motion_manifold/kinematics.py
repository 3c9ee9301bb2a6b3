"""Rotation algebra on exponential coordinates and forward kinematics.

All functions are vectorised over leading axes: an exponential coordinate is
the trailing ``(..., 3)`` axis, a pose is ``(..., n_joint, 3)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# below this angle the Rodrigues coefficients are evaluated from their series
_SMALL_ANGLE = 1e-4
# sin(theta) below this uses the diagonal axis extraction in rotmat_to_exp
_NEAR_PI_SIN = 1e-3


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of ``v`` (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def _rodrigues_coeffs(theta: np.ndarray):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives divided by t."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, s / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - c) / (t * t))
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0, (t * c - s) / t**3)
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0, (t * s - 2.0 * (1.0 - c)) / t**4)
    return a, b, da, db


def exp_to_rotmat(v) -> np.ndarray:
    """Rotation matrix of exponential coordinates ``v`` via Rodrigues' formula."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1:] != (3,):
        raise ValueError(f"expected trailing axis of size 3, got shape {v.shape}")
    _check_finite(v, "exponential coordinates")
    theta = np.linalg.norm(v, axis=-1)
    a, b, _, _ = _rodrigues_coeffs(theta)
    K = hat(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def exp_to_rotmat_jacobian(v) -> np.ndarray:
    """Derivative of :func:`exp_to_rotmat`, shape (..., 3, 3, 3) indexed [row, col, component]."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta)
    K = hat(v)
    K2 = K @ K
    E = hat(np.eye(3))  # E[i] = hat(e_i)
    # d/dv_i of a(t) K + b(t) K^2, with dt/dv_i = v_i / t folded into da, db
    J = (
        np.einsum("...,...i,...ab->...abi", da, v, K)
        + np.einsum("...,...i,...ab->...abi", db, v, K2)
        + np.einsum("...,iab->...abi", a, E)
        + np.einsum("...,iac,...cb->...abi", b, E, K)
        + np.einsum("...,...ac,icb->...abi", b, K, E)
    )
    return J


def rotmat_to_exp(R, atol: float = 1e-6) -> np.ndarray:
    """Exponential coordinates with angle in [0, pi] of rotation matrices ``R`` (..., 3, 3)."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got shape {R.shape}")
    _check_finite(R, "rotation matrix")
    eye = np.eye(3)
    ortho_err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(axis=(-1, -2))
    det = np.linalg.det(R)
    if np.any(ortho_err > atol) or np.any(np.abs(det - 1.0) > atol):
        raise ValueError("matrix is not a proper rotation (orthonormality check failed)")

    w = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    sin_t = 0.5 * np.linalg.norm(w, axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)

    small = theta < _SMALL_ANGLE
    safe_sin = np.where(sin_t > 0, sin_t, 1.0)
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * safe_sin))
    out = scale[..., None] * w

    near_pi = (sin_t < _NEAR_PI_SIN) & (cos_t < 0)
    if np.any(near_pi):
        Rp = R[near_pi]
        S = 0.5 * (Rp + np.swapaxes(Rp, -1, -2))
        ct = cos_t[near_pi]
        # S = cos t I + (1 - cos t) w w^T
        B = (S - ct[:, None, None] * eye) / (1.0 - ct)[:, None, None]
        k = np.argmax(np.einsum("nii->ni", B), axis=-1)
        axis = B[np.arange(len(k)), :, k]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        sign = np.where(np.einsum("ni,ni->n", axis, w[near_pi]) < 0, -1.0, 1.0)
        out[near_pi] = (sign * theta[near_pi])[:, None] * axis
    return out


def canonicalize(v) -> np.ndarray:
    """Equivalent exponential coordinates with angle in [0, pi]."""
    return rotmat_to_exp(exp_to_rotmat(v))


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy. Parents are topologically ordered and the root has parent -1."""

    parents: tuple
    offsets: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        offsets = np.array(self.offsets, dtype=float)
        names = tuple(self.names) or tuple(f"joint{j}" for j in range(len(parents)))
        n = len(parents)
        if offsets.shape != (n, 3):
            raise ValueError(f"offsets must have shape ({n}, 3), got {offsets.shape}")
        if len(names) != n:
            raise ValueError(f"expected {n} joint names, got {len(names)}")
        roots = [j for j, p in enumerate(parents) if p == -1]
        if roots != [0]:
            raise ValueError(f"skeleton must have exactly one root at index 0, found roots {roots}")
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"parents[{j}]={p} violates topological order (need 0 <= parent < {j})")
            if np.linalg.norm(offsets[j]) <= 0:
                raise ValueError(f"joint {j} ({names[j]}) has a zero-length bone offset")
        _check_finite(offsets, "skeleton offsets")
        offsets.setflags(write=False)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "names", names)

    @property
    def n_joint(self) -> int:
        return len(self.parents)

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return (
            self.parents == other.parents
            and self.names == other.names
            and np.array_equal(self.offsets, other.offsets)
        )

    def __hash__(self):
        return hash((self.parents, self.names, self.offsets.tobytes()))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "parents": list(self.parents), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        for key in ("parents", "offsets"):
            if key not in d:
                raise ValueError(f"skeleton is missing field '{key}'")
        return cls(parents=d["parents"], offsets=d["offsets"], names=d.get("names", ()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


def h36m_skeleton() -> Skeleton:
    """Reduced 17-joint human skeleton (meters, y-up), root at the pelvis."""
    joints = [
        ("hips", -1, (0.0, 0.0, 0.0)),
        ("right_hip", 0, (-0.13, 0.0, 0.0)),
        ("right_knee", 1, (0.0, -0.44, 0.0)),
        ("right_ankle", 2, (0.0, -0.44, 0.0)),
        ("left_hip", 0, (0.13, 0.0, 0.0)),
        ("left_knee", 4, (0.0, -0.44, 0.0)),
        ("left_ankle", 5, (0.0, -0.44, 0.0)),
        ("spine", 0, (0.0, 0.23, 0.0)),
        ("thorax", 7, (0.0, 0.25, 0.0)),
        ("neck", 8, (0.0, 0.11, 0.0)),
        ("head", 9, (0.0, 0.11, 0.0)),
        ("left_shoulder", 8, (0.15, 0.0, 0.0)),
        ("left_elbow", 11, (0.28, 0.0, 0.0)),
        ("left_wrist", 12, (0.25, 0.0, 0.0)),
        ("right_shoulder", 8, (-0.15, 0.0, 0.0)),
        ("right_elbow", 14, (-0.28, 0.0, 0.0)),
        ("right_wrist", 15, (-0.25, 0.0, 0.0)),
    ]
    names, parents, offsets = zip(*joints)
    offsets = np.array(offsets)
    offsets[0] = 0.0
    return Skeleton(parents=parents, offsets=offsets, names=names)


def tiny_skeleton() -> Skeleton:
    """Five-joint stick figure used for desk-scale experiments."""
    return Skeleton(
        parents=(-1, 0, 1, 0, 0),
        offsets=[(0.0, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.3, 0.0), (-0.2, -0.5, 0.0), (0.2, -0.5, 0.0)],
        names=("pelvis", "spine", "head", "right_leg", "left_leg"),
    )


def _check_pose(skel: Skeleton, pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.ndim < 2 or pose.shape[-2:] != (skel.n_joint, 3):
        raise ValueError(f"pose shape {pose.shape} does not match skeleton with {skel.n_joint} joints")
    return pose


def _global_rotations(skel: Skeleton, local: np.ndarray) -> np.ndarray:
    G = np.empty_like(local)
    G[..., 0, :, :] = local[..., 0, :, :]
    for j in range(1, skel.n_joint):
        G[..., j, :, :] = G[..., skel.parents[j], :, :] @ local[..., j, :, :]
    return G


def fk_forward(skel: Skeleton, pose) -> np.ndarray:
    """Global joint positions (..., n_joint, 3) of ``pose``; the root sits at the origin."""
    pose = _check_pose(skel, pose)
    _check_finite(pose, "pose")
    G = _global_rotations(skel, exp_to_rotmat(pose))
    points = np.zeros(pose.shape)
    for j in range(1, skel.n_joint):
        p = skel.parents[j]
        points[..., j, :] = points[..., p, :] + G[..., p, :, :] @ skel.offsets[j]
    return points


def fk_backward(skel: Skeleton, pose, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`fk_forward`.

    ``upstream`` is dL/d(points) with the same shape as the positions; the
    return value is dL/d(pose).
    """
    pose = _check_pose(skel, pose)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != pose.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match pose shape {pose.shape}")
    _check_finite(upstream, "upstream gradient")
    local = exp_to_rotmat(pose)
    G = _global_rotations(skel, local)

    g_points = upstream.copy()
    g_global = np.zeros_like(G)
    g_local = np.zeros_like(G)
    for j in range(skel.n_joint - 1, 0, -1):
        p = skel.parents[j]
        # points[j] = points[p] + G[p] @ offset[j]
        g_points[..., p, :] += g_points[..., j, :]
        g_global[..., p, :, :] += g_points[..., j, :, None] * skel.offsets[j]
        # G[j] = G[p] @ local[j]
        g_local[..., j, :, :] = np.swapaxes(G[..., p, :, :], -1, -2) @ g_global[..., j, :, :]
        g_global[..., p, :, :] += g_global[..., j, :, :] @ np.swapaxes(local[..., j, :, :], -1, -2)
    g_local[..., 0, :, :] = g_global[..., 0, :, :]
    return np.einsum("...ab,...abi->...i", g_local, exp_to_rotmat_jacobian(pose))
