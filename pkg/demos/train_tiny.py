"""Memorize four synthetic clips with a small model and report the reconstruction error.

Takes about a minute and a half on one core.
"""

import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from motion_manifold import HyperParams, ManifoldModel, TrainConfig, generate_synthetic, tiny_skeleton, train
from motion_manifold.losses import LossWeights, per_frame_angle_error

files = generate_synthetic(tiny_skeleton(), 4, 30, seed=0)
hp = HyperParams(d_h=64, d_m=8, delta_t=30, n_joint=5, dropout=0.2)
cfg = TrainConfig(lr=0.003, batch_size=4, epochs=2000, seed=0, weights=LossWeights(lambda_G=0.0),
                  checkpoint_every=500)


def progress(epoch, row, state):
    if epoch % 250 == 0:
        print(f"epoch {epoch:5d}  L_ang {row['L_ang']:.4f}  L_pos {row['L_pos']:.4f}  L_W {row['L_W']:.4f}")


out = Path(tempfile.mkdtemp(prefix="tiny_run_"))
with threadpool_limits(1):
    train(files, hp, cfg, out_dir=out, on_epoch=progress)

model = ManifoldModel.from_checkpoint(out / "ckpt_epoch02000.npz")
for f in files:
    err = per_frame_angle_error(f.frames, model.decode(model.encode(f.frames))).mean() / hp.n_joint
    print(f"{f.label:6s} mean angle error per joint: {err:.4f} rad")
print("checkpoints and losses.csv in", out)
