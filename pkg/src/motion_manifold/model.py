"""Sequence autoencoder with rotation and velocity decoders plus a conv discriminator.

Network-space tensors are laid out ``(batch, frames, 3 * n_joint)``. The
``*_graph`` functions build on a :class:`~motion_manifold.autodiff.Tape`; the
plain functions (``encode``, ``decode_rotation`` ...) wrap them for numpy in,
numpy out use.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Variant:
    velocity_decoder: bool
    fk_loss: bool
    adversarial: bool
    manifold_loss: bool
    z_input: bool


# ablation ladder: each name adds one component to the previous
VARIANTS = {
    "S": Variant(False, False, False, False, False),
    "D": Variant(True, False, False, False, False),
    "DK": Variant(True, True, False, False, False),
    "DKG": Variant(True, True, True, False, False),
    "DKGM": Variant(True, True, True, True, False),
    "DKGMZ": Variant(True, True, True, True, True),
}


@dataclass(frozen=True)
class HyperParams:
    d_h: int = 1024
    d_m: int = 64
    delta_t: int = 150
    n_joint: int = 17
    dropout: float = 0.2
    sigma_z_sq: float = 1.0
    variant: str = "DKGM"

    def __post_init__(self):
        for name in ("d_h", "d_m", "delta_t", "n_joint"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta_t < 2:
            raise ValueError("delta_t must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.sigma_z_sq < 0:
            raise ValueError("sigma_z_sq must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joint

    @property
    def flags(self) -> Variant:
        return VARIANTS[self.variant]

    @property
    def decoder_input_dim(self) -> int:
        return self.pose_dim + (self.d_m if self.flags.z_input else 0)


DISC_CHANNELS = (32, 64, 128)
DISC_KERNEL, DISC_STRIDE, DISC_PAD = 4, 2, 1
LEAK = 0.2
BN_MOMENTUM = 0.9
MIN_DISC_FRAMES = 8


def _gru_shapes(prefix, n_in, d_h):
    return {
        f"{prefix}.W": (n_in, 3 * d_h),
        f"{prefix}.U": (d_h, 3 * d_h),
        f"{prefix}.b": (3 * d_h,),
        f"{prefix}.b_hn": (d_h,),
    }


def parameter_shapes(hp: HyperParams) -> dict:
    D, H, M = hp.pose_dim, hp.d_h, hp.d_m
    shapes = {**_gru_shapes("enc", D, H), "enc.Wc": (H, M)}
    for dec in ("rot", "vel"):
        shapes[f"{dec}.We"] = (M, H)
        shapes.update(_gru_shapes(dec, hp.decoder_input_dim, H))
        shapes[f"{dec}.Wo"] = (H, D)
    c_in = D
    for i, c_out in enumerate(DISC_CHANNELS, start=1):
        shapes[f"disc.c{i}.w"] = (c_out, c_in, DISC_KERNEL)
        shapes[f"disc.c{i}.b"] = (c_out,)
        if i > 1:
            shapes[f"disc.bn{i}.gamma"] = (c_out,)
            shapes[f"disc.bn{i}.beta"] = (c_out,)
        c_in = c_out
    shapes["disc.c4.w"] = (1, c_in, 1)
    shapes["disc.c4.b"] = (1,)
    return shapes


def _fan_in(name, shape):
    if name.endswith(".U"):
        return shape[0]
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[0]


def is_gru_key(name: str) -> bool:
    return name.split(".")[0] in ("enc", "rot", "vel") and name.split(".")[1] in ("W", "U", "b", "b_hn")


def is_disc_key(name: str) -> bool:
    return name.startswith("disc.")


@dataclass
class ModelParams:
    hyper: HyperParams
    weights: dict
    buffers: dict = field(default_factory=dict)

    @classmethod
    def init(cls, hyper: HyperParams, seed: int = 0, dtype=np.float64) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) matrices, zero biases, unit batch-norm scales."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in parameter_shapes(hyper).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "gamma":
                w = np.ones(shape)
            elif leaf in ("b", "b_hn", "beta"):
                w = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shape))
                w = rng.uniform(-bound, bound, size=shape)
            weights[name] = w.astype(dtype)
        buffers = {}
        for i, c in enumerate(DISC_CHANNELS[1:], start=2):
            buffers[f"disc.bn{i}.mean"] = np.zeros(c, dtype=dtype)
            buffers[f"disc.bn{i}.var"] = np.ones(c, dtype=dtype)
        return cls(hyper, weights, buffers)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.hyper,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def generator_keys(self):
        return [k for k in self.weights if not is_disc_key(k)]

    def discriminator_keys(self):
        return [k for k in self.weights if is_disc_key(k)]

    def bind(self, tape: ad.Tape, keys=None, requires_grad: bool = True) -> dict:
        keys = self.weights.keys() if keys is None else keys
        return {k: tape.var(self.weights[k], name=k, requires_grad=requires_grad) for k in keys}


# ---------------------------------------------------------------- graphs


def _gru(P, prefix, x, h):
    return ad.gru_cell(x, h, P[f"{prefix}.W"], P[f"{prefix}.U"], P[f"{prefix}.b"], P[f"{prefix}.b_hn"])


def encode_graph(P: dict, frames, hp: HyperParams, train: bool = False, rng=None) -> ad.Var:
    """Run the encoder GRU over ``frames`` and compress the last hidden state.

    ``frames`` is either a Var (B, T, D) or a list of per-frame Vars (B, D).
    """
    if isinstance(frames, ad.Var):
        if frames.ndim != 3 or frames.shape[1:] != (hp.delta_t, hp.pose_dim):
            raise ad.ShapeError(f"encode: motion shape {frames.shape[1:]} != ({hp.delta_t}, {hp.pose_dim})")
        tape = frames.tape
        steps = [frames[:, t, :] for t in range(hp.delta_t)]
    else:
        steps = list(frames)
        if len(steps) != hp.delta_t:
            raise ad.ShapeError(f"encode: got {len(steps)} frames, expected {hp.delta_t}")
        tape = steps[0].tape
    B = steps[0].shape[0]
    h = tape.constant(np.zeros((B, hp.d_h), dtype=P["enc.Wc"].value.dtype))
    for x in steps:
        h = _gru(P, "enc", x, h)
    h = ad.dropout(h, hp.dropout, train, rng)
    return h @ P["enc.Wc"]


def decode_graph(P: dict, z: ad.Var, hp: HyperParams, which: str = "rot", train: bool = False,
                 rng=None, inject: dict | None = None) -> list:
    """Autoregressive decoding; returns the per-step outputs in emission (reversed) order.

    ``inject`` maps a step index to an additive perturbation applied to that
    step's output before it is fed back.
    """
    if which not in ("rot", "vel"):
        raise ValueError(f"decoder must be 'rot' or 'vel', got {which!r}")
    if z.ndim != 2 or z.shape[1] != hp.d_m:
        raise ad.ShapeError(f"decode: latent shape {z.shape}, expected (B, {hp.d_m})")
    tape = z.tape
    B = z.shape[0]
    h = z @ P[f"{which}.We"]
    prev = tape.constant(np.zeros((B, hp.pose_dim), dtype=z.value.dtype))
    outputs = []
    for i in range(hp.delta_t):
        inp = ad.concat([prev, z], axis=1) if hp.flags.z_input else prev
        h = _gru(P, which, inp, h)
        y = ad.dropout(h, hp.dropout, train, rng) @ P[f"{which}.Wo"]
        if which == "vel":
            y = y + prev
        if inject and i in inject:
            y = y + inject[i]
        outputs.append(y)
        prev = y
    return outputs


def to_forward_order(steps: list) -> ad.Var:
    """Stack emission-order steps into a forward-time (B, T, D) Var."""
    return ad.stack(steps[::-1], axis=1)


def discriminator_length(delta_t: int) -> int:
    L = delta_t
    for _ in DISC_CHANNELS:
        L = ad.conv_out_length(L, DISC_KERNEL, DISC_STRIDE, DISC_PAD)
    return L


def discriminate_graph(P: dict, motion: ad.Var, hp: HyperParams, train: bool = True, buffers=None):
    """Score map (B, L) for a batch of network-space motions (B, T, D).

    In training mode batch-norm layers use batch statistics, which are returned
    as ``{layer: (mean, var)}`` for the caller to fold into running averages.
    In evaluation mode ``buffers`` supplies the running statistics.
    """
    if motion.ndim != 3 or motion.shape[2] != hp.pose_dim:
        raise ad.ShapeError(f"discriminate: motion shape {motion.shape}, expected (B, T, {hp.pose_dim})")
    if motion.shape[1] < MIN_DISC_FRAMES:
        raise ValueError(f"discriminator needs at least {MIN_DISC_FRAMES} frames, got {motion.shape[1]}")
    x = ad.transpose(motion, (0, 2, 1))
    stats = {}
    for i in range(1, len(DISC_CHANNELS) + 1):
        x = ad.conv1d(x, P[f"disc.c{i}.w"], P[f"disc.c{i}.b"], stride=DISC_STRIDE, pad=DISC_PAD)
        if i > 1:
            name = f"disc.bn{i}"
            if train:
                x, m, v = ad.batch_norm(x, P[f"{name}.gamma"], P[f"{name}.beta"])
                stats[name] = (m, v)
            else:
                x, _, _ = ad.batch_norm(x, P[f"{name}.gamma"], P[f"{name}.beta"],
                                        buffers[f"{name}.mean"], buffers[f"{name}.var"])
        x = ad.leaky_relu(x, LEAK)
    x = ad.relu(ad.conv1d(x, P["disc.c4.w"], P["disc.c4.b"]))
    return ad.reshape(x, (x.shape[0], x.shape[2])), stats


def update_running_stats(buffers: dict, stats: dict, n: int) -> dict:
    """Momentum update of batch-norm running statistics (unbiased variance)."""
    out = dict(buffers)
    for name, (m, v) in stats.items():
        unbiased = v * n / max(n - 1, 1)
        out[f"{name}.mean"] = BN_MOMENTUM * buffers[f"{name}.mean"] + (1 - BN_MOMENTUM) * m
        out[f"{name}.var"] = BN_MOMENTUM * buffers[f"{name}.var"] + (1 - BN_MOMENTUM) * unbiased
    return out


# ---------------------------------------------------------------- numpy API


def _as_batch(motion, hp: HyperParams):
    m = np.asarray(motion)
    if m.ndim >= 2 and m.shape[-2:] == (hp.n_joint, 3):
        m = m.reshape(m.shape[:-2] + (hp.pose_dim,))
    single = m.ndim == 2
    if single:
        m = m[None]
    if m.ndim != 3 or m.shape[1:] != (hp.delta_t, hp.pose_dim):
        raise ad.ShapeError(
            f"motion shape {np.shape(motion)} incompatible with delta_t={hp.delta_t}, n_joint={hp.n_joint}"
        )
    return m, single


def _as_poses(flat, hp, single):
    out = flat.reshape(flat.shape[:-1] + (hp.n_joint, 3))
    return out[0] if single else out


def encode(motion, params: ModelParams, train: bool = False, rng=None) -> np.ndarray:
    """Latent code(s) of network-space motion(s): (T, J, 3) -> (d_m,), (B, T, J, 3) -> (B, d_m)."""
    hp = params.hyper
    m, single = _as_batch(motion, hp)
    tape = ad.Tape()
    P = params.bind(tape, keys=["enc.W", "enc.U", "enc.b", "enc.b_hn", "enc.Wc"], requires_grad=False)
    z = encode_graph(P, tape.constant(m.astype(params.weights["enc.Wc"].dtype)), hp, train, rng).value
    return z[0] if single else z


@dataclass
class Decoded:
    motion: np.ndarray  # forward temporal order
    raw: np.ndarray  # emission order (last frame first)


def _decode(z, params: ModelParams, which, train, rng, inject=None) -> Decoded:
    hp = params.hyper
    z = np.asarray(z, dtype=params.weights["enc.Wc"].dtype)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if not np.all(np.isfinite(z2)):
        raise ValueError("latent code contains non-finite values")
    tape = ad.Tape()
    keys = [k for k in params.weights if k.startswith(which + ".")]
    P = params.bind(tape, keys=keys, requires_grad=False)
    steps = decode_graph(P, tape.constant(z2), hp, which, train, rng, inject)
    raw = np.stack([s.value for s in steps], axis=1)
    return Decoded(_as_poses(raw[:, ::-1], hp, single), _as_poses(raw, hp, single))


def decode_rotation(z, params: ModelParams, train: bool = False, rng=None, inject=None) -> Decoded:
    return _decode(z, params, "rot", train, rng, inject)


def decode_velocity(z, params: ModelParams, train: bool = False, rng=None, inject=None) -> Decoded:
    return _decode(z, params, "vel", train, rng, inject)


def discriminate(motion, params: ModelParams, train: bool = False) -> np.ndarray:
    """Discriminator score map for network-space motion(s); evaluation mode uses running stats."""
    hp = params.hyper
    m, single = _as_batch(motion, hp)
    tape = ad.Tape()
    P = params.bind(tape, keys=params.discriminator_keys(), requires_grad=False)
    scores, _ = discriminate_graph(P, tape.constant(m), hp, train=train, buffers=params.buffers)
    return scores.value[0] if single else scores.value


def reconstruct(motion, params: ModelParams):
    """(rotation-decoder motion, velocity-decoder motion, z) in evaluation mode."""
    z = encode(motion, params)
    return decode_rotation(z, params).motion, decode_velocity(z, params).motion, z


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, meta: dict | None = None, arrays: dict | None = None) -> None:
    """npz container: ``weights/*``, ``buffers/*``, extra ``arrays`` and a JSON ``meta`` record.

    ``meta`` must be JSON-serialisable; it typically carries normalization
    statistics and the skeleton.
    """
    record = {
        "format": "motion_manifold.checkpoint",
        "version": CHECKPOINT_VERSION,
        "hyper": asdict(params.hyper),
        "variant": params.hyper.variant,
        "dtype": str(next(iter(params.weights.values())).dtype),
        **(meta or {}),
    }
    payload = {f"weights/{k}": v for k, v in params.weights.items()}
    payload.update({f"buffers/{k}": v for k, v in params.buffers.items()})
    payload.update({f"arrays/{k}": v for k, v in (arrays or {}).items()})
    payload["meta"] = np.array(json.dumps(record))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns ``(params, meta, arrays)``."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        if meta.get("format") != "motion_manifold.checkpoint":
            raise ValueError(f"{path}: not a motion_manifold checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        weights, buffers, arrays = {}, {}, {}
        for key in npz.files:
            group, _, name = key.partition("/")
            if group == "weights":
                weights[name] = npz[key]
            elif group == "buffers":
                buffers[name] = npz[key]
            elif group == "arrays":
                arrays[name] = npz[key]
    hyper = HyperParams(**meta["hyper"])
    return ModelParams(hyper, weights, buffers), meta, arrays
