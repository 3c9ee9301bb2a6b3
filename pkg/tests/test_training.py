import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motion_manifold.data import NormStats, fit_normalization, generate_synthetic
from motion_manifold.kinematics import tiny_skeleton
from motion_manifold.losses import LossWeights
from motion_manifold.model import HyperParams, ModelParams, is_gru_key
from motion_manifold.training import (
    CSV_COLUMNS,
    NonFiniteLossError,
    OptimizerState,
    TrainConfig,
    TrainState,
    adam_step,
    clip_global_norm,
    config_to_ini,
    global_norm,
    load_config,
    load_training_checkpoint,
    run_gradcheck,
    train,
    train_step,
)

SKEL = tiny_skeleton()
HP = HyperParams(d_h=12, d_m=4, delta_t=10, n_joint=5, dropout=0.2)
CFG = TrainConfig(batch_size=3, epochs=4, seed=5, checkpoint_every=2)


@pytest.fixture(scope="module")
def files():
    return generate_synthetic(SKEL, 5, 14, seed=1)


def batch(files, n=3):
    return np.stack([f.frames[: HP.delta_t] for f in files[:n]])


def fresh_state(seed=0, hp=HP):
    return TrainState.fresh(ModelParams.init(hp, seed=seed))


# ---------------------------------------------------------------- optimizer


def test_adam_first_step():
    cfg = TrainConfig(lr=0.001)
    p, s = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, OptimizerState.zeros({"w": np.array(0.0)}), cfg)
    assert abs(p["w"] + 0.001) < 1e-10 and s.step == 1


def test_adam_zero_gradient_leaves_params():
    cfg = TrainConfig()
    w = {"w": np.arange(3.0)}
    s = OptimizerState.zeros(w)
    for _ in range(5):
        w2, s = adam_step(w, {"w": np.zeros(3)}, s, cfg)
        assert np.array_equal(w2["w"], w["w"])


def test_adam_converges_on_quadratic():
    cfg = TrainConfig(lr=0.1)
    w = {"w": np.array(0.0)}
    s = OptimizerState.zeros(w)
    # reference recurrence written out longhand
    m = v = 0.0
    ref = 0.0
    errs = []
    for t in range(1, 101):
        g = 2 * (w["w"] - 3.0)
        w, s = adam_step(w, {"w": g}, s, cfg)
        gr = 2 * (ref - 3.0)
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert float(w["w"]) == pytest.approx(ref, abs=1e-12)
        errs.append(abs(float(w["w"]) - 3.0))
    assert errs[-1] < 0.5
    assert all(b < a for a, b in zip(errs[:25], errs[1:26]))


def test_adam_shape_mismatch():
    w = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(w, {"w": np.zeros(2)}, OptimizerState.zeros(w), TrainConfig())


def test_clip_three_four_five():
    out = clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8], atol=1e-15)


def test_clip_below_threshold_is_identity():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(g, 1.0) is g


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(1e-3, 10))
def test_post_clip_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    g = [rng.normal(size=(3, 2)) * rng.uniform(0, 5), rng.normal(size=4)]
    out = clip_global_norm(g, max_norm)
    assert abs(global_norm(out) - min(global_norm(g), max_norm)) < 1e-12
    assert all(np.all(np.abs(o) <= np.abs(i)) for o, i in zip(out, g))


# ---------------------------------------------------------------- config


def test_default_config():
    c = TrainConfig()
    assert (c.lr, c.betas, c.eps, c.batch_size, c.epochs, c.clip_norm) == (0.001, (0.9, 0.999), 1e-8, 30, 500, 1.0)


@pytest.mark.parametrize("bad", [dict(lr=0), dict(batch_size=1), dict(clip_norm=0), dict(epochs=-1)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_ini_roundtrip(tmp_path):
    hp = HyperParams(d_h=32, variant="DK")
    cfg = TrainConfig(lr=0.003, batch_size=4, weights=LossWeights(lambda_G=0.0))
    (tmp_path / "c.ini").write_text(config_to_ini(hp, cfg))
    assert load_config(tmp_path / "c.ini") == (hp, cfg)


def test_ini_unknown_key(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(ValueError, match="learning_rate"):
        load_config(tmp_path / "c.ini")


# ---------------------------------------------------------------- train_step


def test_step_updates_the_right_parameters(files):
    stats = fit_normalization(files)
    state = fresh_state()
    report, new = train_step(batch(files), state, CFG, stats, SKEL, np.random.default_rng(0))
    assert set(report) == set(CSV_COLUMNS[1:])
    assert all(np.isfinite(v) for v in report.values())
    assert new.gen_opt.step == 1 and new.disc_opt.step == 1
    changed = {k for k in state.params.weights if not np.array_equal(state.params.weights[k], new.params.weights[k])}
    assert changed == set(state.params.weights)  # both updates touch every parameter


def test_zero_adversarial_weight_freezes_discriminator(files):
    stats = fit_normalization(files)
    cfg = replace(CFG, weights=LossWeights(lambda_G=0.0))
    state = fresh_state()
    report, new = train_step(batch(files), state, cfg, stats, SKEL, np.random.default_rng(0))
    for k in state.params.discriminator_keys():
        assert np.array_equal(new.params.weights[k], state.params.weights[k])
    for k in state.params.buffers:
        assert np.array_equal(new.params.buffers[k], state.params.buffers[k])
    assert report["L_D"] == 0.0 and report["L_G"] == 0.0


def test_parameter_partition(files, monkeypatch):
    """The discriminator update only writes discriminator weights and vice versa."""
    import motion_manifold.training as T

    calls = []
    real_adam = T.adam_step

    def spy(params, grads, state, config):
        calls.append(set(params))
        return real_adam(params, grads, state, config)

    monkeypatch.setattr(T, "adam_step", spy)
    state = fresh_state()
    train_step(batch(files), state, CFG, fit_normalization(files), SKEL, np.random.default_rng(0))
    assert calls == [set(state.params.discriminator_keys()), set(state.params.generator_keys())]


def test_gru_gradients_are_clipped(files, monkeypatch):
    import motion_manifold.training as T

    seen = {}
    real_adam = T.adam_step

    def spy(params, grads, state, config):
        if "enc.W" in grads:
            seen["norm"] = global_norm({k: g for k, g in grads.items() if is_gru_key(k)})
        return real_adam(params, grads, state, config)

    monkeypatch.setattr(T, "adam_step", spy)
    cfg = replace(CFG, clip_norm=1e-3)
    train_step(batch(files), fresh_state(), cfg, fit_normalization(files), SKEL, np.random.default_rng(0))
    assert seen["norm"] == pytest.approx(1e-3, rel=1e-9)


def test_non_finite_loss_names_term(files):
    stats = NormStats(np.zeros(15), np.ones(15))
    state = fresh_state()
    state.params.weights["rot.Wo"][...] = 1e308
    with pytest.raises(NonFiniteLossError) as info, np.errstate(over="ignore"):
        train_step(batch(files), state, CFG, stats, SKEL, np.random.default_rng(0))
    assert info.value.term == "rotation decoder"


def test_step_rejects_single_clip(files):
    with pytest.raises(ValueError):
        train_step(batch(files, 1), fresh_state(), CFG, fit_normalization(files), SKEL, np.random.default_rng(0))


@pytest.mark.parametrize("variant", ["S", "D", "DK", "DKG", "DKGM", "DKGMZ"])
def test_every_variant_trains(files, variant):
    hp = replace(HP, variant=variant)
    report, _ = train_step(batch(files), fresh_state(hp=hp), CFG, fit_normalization(files), SKEL,
                           np.random.default_rng(0))
    assert all(np.isfinite(v) for v in report.values())
    if variant in ("S", "D"):
        assert report["L_pos"] == 0.0
    if variant in ("S", "D", "DK"):
        assert report["L_D"] == 0.0


# ---------------------------------------------------------------- train loop


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_zero_epochs_writes_initial_checkpoint_only(files, tmp_path):
    res = train(files, HP, replace(CFG, epochs=0), out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch00000.npz"]
    rows = read_csv(tmp_path / "losses.csv")
    assert rows[0] == list(CSV_COLUMNS) and len(rows) == 2


def test_csv_rows_and_checkpoints(files, tmp_path):
    res = train(files, HP, CFG, out_dir=tmp_path)
    rows = read_csv(res.csv_path)
    assert len(rows) - 1 == CFG.epochs + 1
    assert [p.name for p in res.checkpoints] == [f"ckpt_epoch{e:05d}.npz" for e in (0, 2, 4)]
    assert all(np.isfinite(float(x)) for r in rows[1:] for x in r)


def test_training_is_deterministic(files, tmp_path):
    train(files, HP, CFG, out_dir=tmp_path / "a")
    train(files, HP, CFG, out_dir=tmp_path / "b")
    assert (tmp_path / "a/losses.csv").read_bytes() == (tmp_path / "b/losses.csv").read_bytes()


def test_resume_matches_uninterrupted_run(files, tmp_path):
    full = train(files, HP, CFG, out_dir=tmp_path / "full")
    resumed = train(files, HP, CFG, out_dir=tmp_path / "resumed", resume=tmp_path / "full/ckpt_epoch00002.npz")
    assert (tmp_path / "full/losses.csv").read_bytes() == (tmp_path / "resumed/losses.csv").read_bytes()
    for k, v in full.state.params.weights.items():
        assert np.array_equal(v, resumed.state.params.weights[k])


def test_checkpoint_carries_training_state(files, tmp_path):
    train(files, HP, CFG, out_dir=tmp_path)
    state, stats, skel, cfg, epoch, rng, history = load_training_checkpoint(tmp_path / "ckpt_epoch00002.npz")
    assert epoch == 2 and cfg == CFG and skel == SKEL and len(history) == 3
    assert state.gen_opt.step == state.disc_opt.step == 2 * 2  # two batches per epoch


def test_clips_shorter_than_delta_t_are_dropped():
    short = generate_synthetic(SKEL, 3, 5, seed=0)
    with pytest.raises(ValueError, match="frames"):
        train(short, HP, CFG)


# ---------------------------------------------------------------- full-model gradient check


def test_full_model_gradcheck():
    report = run_gradcheck()
    assert report.passed, report.format()
    assert {b.name for b in report.blocks} == set(ModelParams.init(
        HyperParams(d_h=16, d_m=4, delta_t=8, n_joint=5)).weights)
