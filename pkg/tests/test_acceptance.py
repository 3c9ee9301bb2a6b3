"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerance.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in an "acceptance criteria" section of the terminal summary.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from motion_manifold.applications import (
    ManifoldModel,
    Reconstruction,
    analogy,
    denoise,
    evaluate,
    interpolate,
)
from motion_manifold.data import corrupt_zero_joints, generate_synthetic
from motion_manifold.kinematics import (
    exp_to_rotmat,
    fk_backward,
    fk_forward,
    h36m_skeleton,
    rotmat_to_exp,
    tiny_skeleton,
)
from motion_manifold.losses import KernelConfig, LossWeights, lsgan_losses, mmd_loss, per_frame_angle_error
from motion_manifold.model import HyperParams, decode_rotation
from motion_manifold.training import (
    TrainConfig,
    _initial_batch,
    evaluate_losses,
    load_training_checkpoint,
    run_gradcheck,
    train,
)

from oracles import central_difference, fk_matrix_stack, interval_metric_loop, mmd_double_loop

TINY = tiny_skeleton()
H36M = h36m_skeleton()
OVERFIT_HP = HyperParams(d_h=64, d_m=8, delta_t=30, n_joint=5, dropout=0.2)
OVERFIT_CFG = TrainConfig(lr=0.003, batch_size=4, epochs=2000, seed=0,
                          weights=LossWeights(lambda_G=0.0), checkpoint_every=1000)


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture(scope="module")
def overfit_files():
    return generate_synthetic(TINY, 4, OVERFIT_HP.delta_t, seed=0)


@pytest.fixture(scope="module")
def overfit(tmp_path_factory, overfit_files):
    out = tmp_path_factory.mktemp("overfit")
    with threadpool_limits(1):
        t0 = time.perf_counter()
        result = train(overfit_files, OVERFIT_HP, OVERFIT_CFG, out_dir=out)
        elapsed = time.perf_counter() - t0
    model = ManifoldModel.from_checkpoint(out / f"ckpt_epoch{OVERFIT_CFG.epochs:05d}.npz")
    return out, result, model, elapsed


def random_exp(rng, n, lo=0.01, hi=np.pi - 0.01):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    return axis * rng.uniform(lo, hi, size=(n, 1))


# ---------------------------------------------------------------- 1


def test_01_gradient_integrity(criterion):
    t0 = time.perf_counter()
    report = run_gradcheck(seed=0, tol=1e-3, step=1e-5, max_entries=20)
    elapsed = time.perf_counter() - t0
    worst = max(b.max_rel_error for b in report.blocks)
    ok = report.passed and elapsed < 60
    criterion(1, "gradient integrity", ok,
              f"{len(report.blocks)} blocks, worst rel err {worst:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------- 2


def test_02_forward_kinematics(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    poses = random_exp(rng, 1000 * 17, 0.0, np.pi).reshape(1000, 17, 3)
    pos = fk_forward(H36M, poses)
    child = np.arange(1, 17)
    bone = np.linalg.norm(pos[:, child] - pos[:, np.asarray(H36M.parents)[child]], axis=-1)
    rest = np.linalg.norm(H36M.offsets[child], axis=-1)
    bone_err = np.max(np.abs(bone - rest) / rest)

    oracle_err = max(np.abs(fk_forward(H36M, p) - fk_matrix_stack(H36M.parents, H36M.offsets, p)).max()
                     for p in poses[:50])

    bwd_err = 0.0
    for p in poses[:5]:
        g = rng.normal(size=(17, 3))
        analytic = fk_backward(H36M, p, g)
        numeric = central_difference(lambda q: float(np.sum(fk_forward(H36M, q) * g)), p, 1e-6)
        bwd_err = max(bwd_err, np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-6))
    elapsed = time.perf_counter() - t0
    ok = bone_err < 1e-9 and oracle_err < 1e-10 and bwd_err < 1e-4 and elapsed < 10
    criterion(2, "forward kinematics", ok,
              f"bone rel {bone_err:.1e} (< 1e-9), oracle {oracle_err:.1e} (< 1e-10), "
              f"backward {bwd_err:.1e} (< 1e-4), {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------- 3


def test_03_rotation_algebra(criterion):
    v = random_exp(np.random.default_rng(1), 1000)
    R = exp_to_rotmat(v)
    roundtrip = np.abs(rotmat_to_exp(R) - v).max()
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    det = np.abs(np.linalg.det(R) - 1).max()
    ok = roundtrip < 1e-8 and ortho < 1e-12 and det < 1e-12
    criterion(3, "rotation algebra", ok,
              f"roundtrip {roundtrip:.1e} (< 1e-8), |R^T R - I| {ortho:.1e}, |det - 1| {det:.1e} (< 1e-12)")


# ---------------------------------------------------------------- 4


def test_04_mmd_estimator(criterion):
    rng = np.random.default_rng(2)
    agree = 0.0
    for _ in range(20):
        z, p = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        kernel = KernelConfig.for_latent(4)
        agree = max(agree, abs(mmd_loss(z, p, kernel) - mmd_double_loop(z, p, kernel.C)))

    kernel = KernelConfig.for_latent(64)
    same, shifted = [], []
    for seed in range(100):
        r = np.random.default_rng(seed)
        prior = r.normal(size=(64, 64))
        same.append(mmd_loss(r.normal(size=(64, 64)), prior, kernel))
        shifted.append(mmd_loss(r.normal(size=(64, 64)) + 3.0, prior, kernel))
    gap = np.mean(shifted) - np.mean(same)
    margin = 5 * np.std(same, ddof=1) / np.sqrt(100)
    ok = agree < 1e-12 and gap > margin
    criterion(4, "MMD estimator", ok,
              f"oracle {agree:.1e} (< 1e-12), mean gap {gap:.3e} > 5 SE {margin:.3e} (C={kernel.C:g})")


# ---------------------------------------------------------------- 5


def test_05_overfit_reconstruction(criterion, overfit, overfit_files):
    out, result, model, elapsed = overfit
    hp = OVERFIT_HP
    errs = [per_frame_angle_error(f.frames, model.decode(model.encode(f.frames))) / hp.n_joint
            for f in overfit_files]
    angle = float(np.mean(errs))
    final = evaluate_losses(_initial_batch(overfit_files, hp.delta_t, OVERFIT_CFG.batch_size),
                            result.state.params, OVERFIT_CFG, result.stats, TINY,
                            np.random.default_rng([OVERFIT_CFG.seed, 1]))
    ratio = final["L_ang"] / result.history[0]["L_ang"]
    ok = angle < 0.05 and ratio <= 0.1 and elapsed < 600
    criterion(5, "overfit reconstruction", ok,
              f"angle error {angle:.4f} rad/joint (< 0.05), L_ang ratio {ratio:.4f} (<= 0.1), "
              f"{elapsed:.0f}s (< 600s)")


# ---------------------------------------------------------------- 6


def test_06_denoising(criterion, overfit, overfit_files):
    model = overfit[2]
    wins = 0
    for seed in range(20):
        truth = overfit_files[seed % 4].frames
        noisy = corrupt_zero_joints(truth, 0.5, np.random.default_rng(seed))
        clean = denoise(noisy, model)
        target = fk_forward(TINY, truth)
        e_noisy = np.linalg.norm(fk_forward(TINY, noisy) - target, axis=-1).sum()
        e_clean = np.linalg.norm(fk_forward(TINY, clean) - target, axis=-1).sum()
        wins += e_clean < e_noisy
    criterion(6, "denoising", wins >= 18, f"{wins}/20 trials improved (>= 18)")


# ---------------------------------------------------------------- 7


def test_07_interpolation_and_analogy(criterion, overfit, overfit_files):
    model = overfit[2]
    a, b, c = (f.frames for f in overfit_files[:3])
    checks = {}
    for dec in ("rot", "vel"):
        path = interpolate(a, b, 7, model, dec)
        checks[f"{dec} alpha=0"] = np.array_equal(path[0], model.decode(model.encode(a), dec))
        checks[f"{dec} alpha=1"] = np.array_equal(path[-1], model.decode(model.encode(b), dec))
        checks[f"{dec} A-A+C"] = np.array_equal(analogy(a, a, c, model, dec), model.decode(model.encode(c), dec))
        checks[f"{dec} A-B+B"] = np.array_equal(analogy(a, b, b, model, dec), model.decode(model.encode(a), dec))
    failed = [k for k, v in checks.items() if not v]
    criterion(7, "interpolation/analogy exactness", not failed,
              f"{len(checks) - len(failed)}/{len(checks)} bit-exact" + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------- 8


def test_08_lsgan_plumbing(criterion):
    real, fake = np.ones(18), np.zeros(18)
    d1, g1 = lsgan_losses(real, fake)
    half = np.full(18, 0.5)
    d2, g2 = lsgan_losses(half, half)
    ok = (d1, g1, d2, g2) == (0.0, 0.5, 0.25, 0.125)
    criterion(8, "LSGAN plumbing", ok, f"perfect D: L_D={d1}, L_G={g1}; constant 1/2: L_D={d2}, L_G={g2}")


# ---------------------------------------------------------------- 9


def test_09_determinism(criterion, overfit, overfit_files, tmp_path):
    out = overfit[0]
    with threadpool_limits(1):
        train(overfit_files, OVERFIT_HP, OVERFIT_CFG, out_dir=tmp_path / "again")
        mid = OVERFIT_CFG.epochs // 2
        train(overfit_files, OVERFIT_HP, OVERFIT_CFG, out_dir=tmp_path / "resumed",
              resume=out / f"ckpt_epoch{mid:05d}.npz")
    reference = (out / "losses.csv").read_bytes()
    rerun = (tmp_path / "again/losses.csv").read_bytes() == reference
    resumed_csv = (tmp_path / "resumed/losses.csv").read_bytes() == reference
    name = f"ckpt_epoch{OVERFIT_CFG.epochs:05d}.npz"
    w_full = load_training_checkpoint(out / name)[0].params.weights
    w_res = load_training_checkpoint(tmp_path / "resumed" / name)[0].params.weights
    resumed_weights = all(np.array_equal(v, w_res[k]) for k, v in w_full.items())
    ok = rerun and resumed_csv and resumed_weights
    criterion(9, "determinism", ok,
              f"rerun CSV identical={rerun}, resume CSV identical={resumed_csv}, "
              f"resume weights identical={resumed_weights}")


# ---------------------------------------------------------------- 10


def test_10_reversal_contract(criterion, overfit, overfit_files):
    model = overfit[2]
    last = OVERFIT_HP.delta_t - 1
    nearest, notes = [], []
    for f in overfit_files:
        raw = model.stats.invert(decode_rotation(model.encode(f.frames), model.params).raw)
        d = per_frame_angle_error(f.frames, raw[0][None])
        i = int(np.argmin(d))
        nearest.append(i)
        if i != last:
            # a periodic clip can revisit its last pose; report how close the rival frame is
            twin = per_frame_angle_error(f.frames[last], f.frames[i])
            notes.append(f"{f.label}: d[{i}]={d[i]:.3f} vs d[{last}]={d[last]:.3f}, "
                         f"input frames {i} and {last} differ by {twin:.3f}, d[0]={d[0]:.3f}")
    criterion(10, "reversal contract", all(i == last for i in nearest),
              f"nearest input frame to raw frame 0 per clip: {nearest} (want {last})"
              + ("; " + "; ".join(notes) if notes else ""))


# ---------------------------------------------------------------- 11


class PerfectModel:
    hyper = HyperParams(d_h=4, d_m=4, delta_t=20, n_joint=5)
    skeleton = TINY

    def reconstruct(self, m):
        z = m[:4, 0, 0].copy()
        return Reconstruction(m, m, z, z, z)


def test_11_metric_harness(criterion, overfit):
    clips = generate_synthetic(TINY, 5, 20, seed=3)
    perfect = evaluate(clips, PerfectModel())
    zero = all(not perfect.E_r[d].any() and not perfect.E_p[d].any() and perfect.E_z[d] == 0.0
               for d in ("rot", "vel"))

    model = overfit[2]
    motions = [c.frames for c in generate_synthetic(TINY, 4, 30, seed=11)]
    report = evaluate(motions, model)
    gap = 0.0
    for dec in ("rot", "vel"):
        ref = [interval_metric_loop(m, model.decode(model.encode(m), dec), TINY.parents, TINY.offsets, 5)
               for m in motions]
        gap = max(gap, np.abs(report.E_r[dec] - np.mean([r[0] for r in ref], axis=0)).max(),
                  np.abs(report.E_p[dec] - np.mean([r[1] for r in ref], axis=0)).max())
    rows = list(report.rows())
    layout = len(rows) == 10 and sorted({r[0] for r in rows}) == ["rot", "vel"]
    ok = zero and gap < 1e-10 and layout
    criterion(11, "metric harness parity", ok,
              f"perfect stub all zero={zero}, loop oracle gap {gap:.1e} (< 1e-10), "
              f"{len(rows)} interval rows over 2 decoders")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
