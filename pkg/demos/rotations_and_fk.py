"""Exponential-map rotations and forward kinematics on the 17-joint skeleton."""

import numpy as np

from motion_manifold import exp_to_rotmat, fk_forward, h36m_skeleton, rotmat_to_exp
from motion_manifold.kinematics import fk_backward

rng = np.random.default_rng(0)
skel = h36m_skeleton()

v = np.array([0.0, 0.0, np.pi / 2])
R = exp_to_rotmat(v)
print("quarter turn about z:\n", R.round(6))
print("back to exp coords:", rotmat_to_exp(R))

pose = rng.normal(scale=0.3, size=(skel.n_joint, 3))
pos = fk_forward(skel, pose)
rest = fk_forward(skel, np.zeros_like(pose))
bones = [(j, p) for j, p in enumerate(skel.parents) if p >= 0]
drift = max(abs(np.linalg.norm(pos[j] - pos[p]) - np.linalg.norm(rest[j] - rest[p])) for j, p in bones)
print(f"largest bone-length change under a random pose: {drift:.2e}")

g = rng.normal(size=pos.shape)
grad = fk_backward(skel, pose, g)
print("gradient of <FK(pose), g> w.r.t. the root rotation:", grad[0].round(4))
