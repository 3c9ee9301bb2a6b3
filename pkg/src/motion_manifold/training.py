"""Adam, global-norm clipping and the alternating discriminator/generator loop."""
from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import NormStats, fit_normalization, sample_clip
from .kinematics import Skeleton
from .model import (
    HyperParams,
    ModelParams,
    decode_graph,
    discriminate_graph,
    encode_graph,
    is_gru_key,
    load_checkpoint,
    save_checkpoint,
    to_forward_order,
    update_running_stats,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "L_R", "L_ang", "L_pos", "L_M", "L_W", "L_G", "L_D")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"non-finite value while computing {term}" + (f" ({detail})" if detail else ""))
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 30
    epochs: int = 500
    clip_norm: float = 1.0
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    mmd_biased: bool = False
    checkpoint_every: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (the MMD estimate needs two codes)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = L.LossWeights(**d.get("weights", {}))
        return cls(**d)


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(float(t) for t in text.replace("(", "").replace(")", "").split(","))
    return text.strip()


def load_config(path, hyper: HyperParams | None = None, config: TrainConfig | None = None):
    """Read an INI-style file with ``[model]``, ``[train]`` and ``[loss]`` sections.

    Keys are the field names of :class:`HyperParams`, :class:`TrainConfig`
    and :class:`~motion_manifold.losses.LossWeights`; anything absent keeps
    its default.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names (lambda_M ...)
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    hyper = hyper or HyperParams()
    config = config or TrainConfig()
    known = {"model", "train", "loss"}
    for section in parser.sections():
        if section not in known:
            raise ValueError(f"{path}: unknown section [{section}]")

    def merged(obj, section):
        if not parser.has_section(section):
            return obj
        updates = {}
        names = {f.name for f in fields(obj)}
        for key, value in parser.items(section):
            if key not in names:
                raise ValueError(f"{path}: unknown key '{key}' in [{section}]")
            updates[key] = _coerce(value, getattr(obj, key))
        return replace(obj, **updates)

    hyper = merged(hyper, "model")
    weights = merged(config.weights, "loss")
    config = replace(merged(config, "train"), weights=weights)
    return hyper, config


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam on the keys present in ``grads``; returns new (params, state)."""
    b1, b2 = config.betas
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ad.ShapeError(f"adam: gradient shape {g.shape} != parameter shape {params[k].shape} for '{k}'")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new_params[k] = params[k] - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new_params, OptimizerState(m, v, t)


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in values)))


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients by ``max_norm / norm`` when their joint L2 norm exceeds ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    if isinstance(grads, dict):
        return {k: g * s for k, g in grads.items()}
    return [g * s for g in grads]


# ---------------------------------------------------------------- one step


@dataclass
class TrainState:
    params: ModelParams
    gen_opt: OptimizerState
    disc_opt: OptimizerState

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        gen = {k: params.weights[k] for k in params.generator_keys()}
        disc = {k: params.weights[k] for k in params.discriminator_keys()}
        return cls(params, OptimizerState.zeros(gen), OptimizerState.zeros(disc))


class _Stage:
    """Tags NonFiniteError from the tape with the loss term being built."""

    def __init__(self):
        self.term = "forward"

    def __call__(self, term):
        self.term = term
        return self


def generator_losses(params: ModelParams, P: dict, x_raw: np.ndarray, stats: NormStats, skel: Skeleton,
                     config: TrainConfig, rng: np.random.Generator, train: bool, stage=None) -> dict:
    """Builds every generator-side term on the tape of ``P``; returns Vars plus the fakes."""
    stage = stage or _Stage()
    hp = params.hyper
    flags = hp.flags
    tape = next(iter(P.values())).tape
    B = x_raw.shape[0]
    x = stats.apply(x_raw).reshape(B, hp.delta_t, hp.pose_dim)
    std = stats.std.reshape(hp.n_joint, 3)
    mean = stats.mean.reshape(hp.n_joint, 3)

    def radians(v):
        return ad.reshape(v, (B, hp.delta_t, hp.n_joint, 3)) * std + mean

    stage("encoder")
    z = encode_graph(P, tape.constant(x), hp, train, rng)
    stage("rotation decoder")
    rot_steps = decode_graph(P, z, hp, "rot", train, rng)
    rot = to_forward_order(rot_steps)
    vel_steps = vel = None
    if flags.velocity_decoder:
        stage("velocity decoder")
        vel_steps = decode_graph(P, z, hp, "vel", train, rng)
        vel = to_forward_order(vel_steps)

    stage("L_R")
    parts = L.motion_reconstruction_loss(
        tape.constant(x_raw), radians(rot), radians(vel) if vel is not None else None,
        skel if flags.fk_loss else None, config.weights,
    )
    if flags.manifold_loss:
        stage("L_M")
        z_rot = encode_graph(P, rot_steps[::-1], hp, train, rng)
        z_vel = encode_graph(P, vel_steps[::-1], hp, train, rng) if vel_steps else None
        parts["L_M"] = L.manifold_reconstruction_loss(z, z_rot, z_vel)
    stage("L_W")
    prior = rng.normal(scale=np.sqrt(hp.sigma_z_sq), size=(B, hp.d_m))
    parts["L_W"] = L.mmd_loss(z, prior, L.KernelConfig.for_latent(hp.d_m, hp.sigma_z_sq), config.mmd_biased)
    parts["_fakes"] = [rot] + ([vel] if vel is not None else [])
    parts["_z"] = z
    parts["_x"] = x
    return parts


def _adversarial_active(params: ModelParams, config: TrainConfig) -> bool:
    return params.hyper.flags.adversarial and config.weights.lambda_G > 0


def _check(value, term):
    if not np.all(np.isfinite(value)):
        raise NonFiniteLossError(term)


def train_step(batch: np.ndarray, state: TrainState, config: TrainConfig, stats: NormStats,
               skel: Skeleton, rng: np.random.Generator):
    """One discriminator update followed by one generator update.

    ``batch`` is (B, T, n_joint, 3) in radians. Returns ``(report, new_state)``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 4 or batch.shape[0] < 2:
        raise ValueError(f"batch must be (B>=2, T, n_joint, 3), got {batch.shape}")
    params = state.params
    hp = params.hyper
    stage = _Stage()
    tape = ad.Tape()
    G = params.bind(tape, params.generator_keys())
    try:
        parts = generator_losses(params, G, batch, stats, skel, config, rng, True, stage)
        fakes = parts.pop("_fakes")
        x = parts.pop("_x")
        parts.pop("_z")
        disc_weights = dict(params.weights)
        buffers = params.buffers
        disc_opt = state.disc_opt
        L_D_value = 0.0
        if _adversarial_active(params, config):
            stage("L_D")
            dtape = ad.Tape()
            D = params.bind(dtape, params.discriminator_keys())
            real_scores, st_real = discriminate_graph(D, dtape.constant(x), hp, train=True)
            fake_in = np.concatenate([f.value for f in fakes], axis=0)
            fake_scores, st_fake = discriminate_graph(D, dtape.constant(fake_in), hp, train=True)
            L_D, _ = L.lsgan_losses(real_scores, fake_scores)
            L_D_value = float(L_D.value)
            d_grads = dtape.backward(L.discriminator_objective(L_D, config.weights)).collect(D)
            d_params = {k: params.weights[k] for k in D}
            d_params, disc_opt = adam_step(d_params, d_grads, state.disc_opt, config)
            disc_weights.update(d_params)
            buffers = update_running_stats(buffers, st_real, x.shape[0] * real_scores.shape[1])
            buffers = update_running_stats(buffers, st_fake, fake_in.shape[0] * fake_scores.shape[1])

            stage("L_G")
            Dc = {k: tape.constant(disc_weights[k]) for k in D}
            g_scores, _ = discriminate_graph(Dc, ad.concat(fakes, axis=0), hp, train=True)
            parts["L_G"] = L.lsgan_generator_loss(g_scores)
        stage("total")
        total = L.total_loss(parts, config.weights)
    except ad.NonFiniteError as e:
        raise NonFiniteLossError(stage.term, f"op '{e.op}'") from e

    report = {k: float(v.value) for k, v in parts.items()}
    report.setdefault("L_M", 0.0)
    report.setdefault("L_G", 0.0)
    report["L_D"] = L_D_value
    for k, v in report.items():
        _check(v, k)

    grads = tape.backward(total).collect(G)
    gru = {k: g for k, g in grads.items() if is_gru_key(k)}
    grads.update(clip_global_norm(gru, config.clip_norm))
    g_params = {k: params.weights[k] for k in G}
    g_params, gen_opt = adam_step(g_params, grads, state.gen_opt, config)
    weights = dict(disc_weights)
    weights.update(g_params)
    new_params = ModelParams(hp, weights, buffers)
    return report, TrainState(new_params, gen_opt, disc_opt)


def evaluate_losses(batch: np.ndarray, params: ModelParams, config: TrainConfig, stats: NormStats,
                    skel: Skeleton, rng: np.random.Generator) -> dict:
    """Loss report in evaluation mode (no dropout, running batch-norm stats, no update)."""
    batch = np.asarray(batch, dtype=float)
    hp = params.hyper
    tape = ad.Tape()
    G = params.bind(tape, params.generator_keys(), requires_grad=False)
    parts = generator_losses(params, G, batch, stats, skel, config, rng, False)
    fakes = parts.pop("_fakes")
    x = parts.pop("_x")
    parts.pop("_z")
    report = {k: float(v.value) for k, v in parts.items()}
    report.setdefault("L_M", 0.0)
    report["L_G"] = report["L_D"] = 0.0
    if _adversarial_active(params, config):
        D = params.bind(tape, params.discriminator_keys(), requires_grad=False)
        real, _ = discriminate_graph(D, tape.constant(x), hp, train=False, buffers=params.buffers)
        fake, _ = discriminate_graph(D, ad.concat(fakes, axis=0), hp, train=False, buffers=params.buffers)
        L_D, L_G = L.lsgan_losses(real, fake)
        report["L_D"], report["L_G"] = float(L_D.value), float(L_G.value)
    return report


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    state: TrainState
    stats: NormStats
    history: list
    checkpoints: list
    csv_path: Path | None


def _opt_arrays(prefix, opt: OptimizerState) -> dict:
    out = {f"{prefix}/m/{k}": v for k, v in opt.m.items()}
    out.update({f"{prefix}/v/{k}": v for k, v in opt.v.items()})
    return out


def _opt_from_arrays(prefix, arrays, step) -> OptimizerState:
    m = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(prefix + "/m/")}
    v = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(prefix + "/v/")}
    return OptimizerState(m, v, step)


def save_training_checkpoint(path, state: TrainState, stats: NormStats, skel: Skeleton,
                             config: TrainConfig, epoch: int, rng: np.random.Generator, history: list):
    meta = {
        "epoch": epoch,
        "stats": stats.to_dict(),
        "skeleton": skel.to_dict(),
        "train_config": config.to_dict(),
        "rng_state": rng.bit_generator.state,
        "gen_step": state.gen_opt.step,
        "disc_step": state.disc_opt.step,
        "history": history,
    }
    arrays = {**_opt_arrays("gen", state.gen_opt), **_opt_arrays("disc", state.disc_opt)}
    save_checkpoint(path, state.params, meta, arrays)


def load_training_checkpoint(path):
    """Returns ``(state, stats, skeleton, config, epoch, rng, history)``."""
    params, meta, arrays = load_checkpoint(path)
    state = TrainState(params, _opt_from_arrays("gen", arrays, meta["gen_step"]),
                       _opt_from_arrays("disc", arrays, meta["disc_step"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return (state, NormStats.from_dict(meta["stats"]), Skeleton.from_dict(meta["skeleton"]),
            TrainConfig.from_dict(meta["train_config"]), meta["epoch"], rng, meta["history"])


def _write_csv(path: Path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])


def _initial_batch(files, delta_t, batch_size):
    return np.stack([f.frames[:delta_t] for f in files[:batch_size]])


def train(files, hyper: HyperParams, config: TrainConfig, out_dir=None, skel: Skeleton | None = None,
          stats: NormStats | None = None, resume=None, on_epoch=None) -> TrainResult:
    """Epoch loop over shuffled clips with periodic checkpoints and a loss CSV.

    ``resume`` is a checkpoint path written by a previous call; training then
    continues from its epoch up to ``config.epochs``. Row 0 of the history is
    an evaluation-mode loss report of the initial model.
    """
    if resume is not None:
        state, stats, skel, saved_config, start_epoch, rng, history = load_training_checkpoint(resume)
        config = replace(saved_config, epochs=config.epochs, checkpoint_every=config.checkpoint_every)
        hyper = state.params.hyper
    files = [f for f in files if len(f) >= hyper.delta_t]
    if not files:
        raise ValueError(f"no training motion has at least {hyper.delta_t} frames")
    skel = skel or files[0].skeleton
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is None:
        stats = stats or fit_normalization(files)
        rng = np.random.default_rng(config.seed)
        state = TrainState.fresh(ModelParams.init(hyper, seed=config.seed))
        start_epoch = 0
        eval_rng = np.random.default_rng([config.seed, 1])
        init = evaluate_losses(_initial_batch(files, hyper.delta_t, config.batch_size),
                               state.params, config, stats, skel, eval_rng)
        history = [{"epoch": 0, **{c: init[c] for c in CSV_COLUMNS[1:]}}]

    checkpoints = []

    def checkpoint(epoch):
        if out_dir is None:
            return
        path = out_dir / f"ckpt_epoch{epoch:05d}.npz"
        save_training_checkpoint(path, state, stats, skel, config, epoch, rng, history)
        checkpoints.append(path)

    if resume is None:
        checkpoint(0)

    n = len(files)
    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = rng.permutation(n)
        reports = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            if len(idx) < 2:
                continue
            batch = np.stack([sample_clip(files[i], hyper.delta_t, rng) for i in idx])
            report, state = train_step(batch, state, config, stats, skel, rng)
            reports.append(report)
        row = {"epoch": epoch}
        for c in CSV_COLUMNS[1:]:
            row[c] = float(np.mean([r[c] for r in reports])) if reports else float("nan")
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row, state)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            checkpoint(epoch)
        log.debug("epoch %d: %s", epoch, row)

    csv_path = None
    if out_dir is not None:
        csv_path = out_dir / "losses.csv"
        _write_csv(csv_path, history)
    return TrainResult(state, stats, history, checkpoints, csv_path)


def config_to_ini(hyper: HyperParams, config: TrainConfig) -> str:
    """Render a config in the format read by :func:`load_config`."""
    lines = ["[model]"]
    lines += [f"{k} = {v}" for k, v in asdict(hyper).items()]
    lines += ["", "[train]"]
    for k, v in asdict(config).items():
        if k == "weights":
            continue
        lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines += ["", "[loss]"]
    lines += [f"{k} = {v}" for k, v in asdict(config.weights).items()]
    return "\n".join(lines) + "\n"


GRADCHECK_HYPER = HyperParams(d_h=16, d_m=4, delta_t=8, n_joint=5, dropout=0.0, variant="DKGM")


def full_objective(tape, leaves: dict, params: ModelParams, batch: np.ndarray, stats: NormStats,
                   skel: Skeleton, config: TrainConfig, seed: int = 0) -> ad.Var:
    """Generator objective plus the discriminator objective, every term differentiable.

    Used for gradient checking: fakes are not detached and batch-norm uses
    batch statistics, so every parameter block receives a gradient.
    """
    rng = np.random.default_rng(seed)
    hp = params.hyper
    parts = generator_losses(params, leaves, batch, stats, skel, config, rng, train=False)
    fakes = parts.pop("_fakes")
    x = parts.pop("_x")
    parts.pop("_z")
    D = {k: leaves[k] for k in params.discriminator_keys()}
    real, _ = discriminate_graph(D, tape.constant(x), hp, train=True)
    fake, _ = discriminate_graph(D, ad.concat(fakes, axis=0), hp, train=True)
    L_D, L_G = L.lsgan_losses(real, fake)
    parts["L_G"] = L_G
    return L.total_loss(parts, config.weights) + L.discriminator_objective(L_D, config.weights)


def run_gradcheck(seed: int = 0, tol: float = 1e-3, step: float = 1e-5, max_entries: int | None = 6,
                  dtype=np.float64, hyper: HyperParams = GRADCHECK_HYPER, batch_size: int = 4):
    """Finite-difference check of every parameter block of the tiny full model."""
    from .data import generate_synthetic
    from .kinematics import tiny_skeleton

    skel = tiny_skeleton() if hyper.n_joint == 5 else None
    if skel is None:
        raise ValueError("gradient check is defined for the 5-joint tiny skeleton")
    files = generate_synthetic(skel, batch_size, hyper.delta_t, seed=seed)
    batch = np.stack([f.frames for f in files])
    stats = fit_normalization(files)
    params = ModelParams.init(hyper, seed=seed, dtype=dtype)
    # non-trivial discriminator affine terms so their gradients are exercised
    rng = np.random.default_rng([seed, 7])
    for k in params.discriminator_keys():
        if k.endswith((".b", ".beta")):
            params.weights[k] = (0.1 * rng.normal(size=params.weights[k].shape)).astype(dtype)
    params.weights["disc.c4.b"] = np.full((1,), 0.5, dtype=dtype)
    config = TrainConfig(batch_size=batch_size)

    def f(tape, leaves):
        return full_objective(tape, leaves, params, batch, stats, skel, config, seed)

    return ad.gradient_check(f, params.weights, step=step, tol=tol, max_entries=max_entries, seed=seed)
