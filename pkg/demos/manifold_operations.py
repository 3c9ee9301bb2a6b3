"""Sampling, interpolation, denoising and analogy with a trained checkpoint.

Usage: python3 demos/manifold_operations.py CKPT

CKPT must hold a 5-joint model trained on 30-frame clips, such as the one
written by demos/train_tiny.py.
"""

import sys

import numpy as np

from motion_manifold import (
    ManifoldModel,
    analogy,
    denoise,
    fk_forward,
    generate_synthetic,
    interpolate,
    sample_random,
)
from motion_manifold.data import corrupt_zero_joints

model = ManifoldModel.from_checkpoint(sys.argv[1])
skel = model.skeleton
clips = [c.frames for c in generate_synthetic(skel, 4, model.hyper.delta_t, seed=0)]


def position_error(a, b):
    return np.linalg.norm(fk_forward(skel, a) - fk_forward(skel, b), axis=-1).sum()


samples, codes = sample_random(3, model, seed=1)
print("sampled codes:\n", codes.round(3))

path = interpolate(clips[0], clips[1], 5, model)
print("interpolation, position distance from the first clip:",
      [round(float(position_error(p, clips[0])), 2) for p in path])

noisy = corrupt_zero_joints(clips[2], 0.5, np.random.default_rng(0))
print(f"corrupted error {position_error(noisy, clips[2]):.2f}, "
      f"denoised error {position_error(denoise(noisy, model), clips[2]):.2f}")

moved = analogy(clips[0], clips[1], clips[3], model)
print("analogy result shape:", moved.shape)
