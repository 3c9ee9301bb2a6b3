"""Command-line entry point: ``motion-manifold <command> [flags]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure
(non-finite loss, failed gradient check, I/O).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import applications as app
from .autodiff import ShapeError
from .data import (
    DatasetSplit,
    corrupt_zero_joints,
    generate_synthetic,
    load_motion,
    preprocess,
    read_manifest,
    save_motion,
    write_manifest,
)
from .kinematics import Skeleton, h36m_skeleton, tiny_skeleton
from .losses import LossWeights
from .model import HyperParams
from .training import NonFiniteLossError, TrainConfig, load_config, run_gradcheck, train

log = logging.getLogger("motion_manifold")

_HP, _TC, _LW = HyperParams(), TrainConfig(), LossWeights()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _skeleton(spec: str) -> Skeleton:
    if spec == "h36m":
        return h36m_skeleton()
    if spec == "tiny":
        return tiny_skeleton()
    return Skeleton.load(spec)


def _manifest(data: str) -> Path:
    p = Path(data)
    return p / "manifest.txt" if p.is_dir() else p


def _load_split(data: str, which: str, skel: Skeleton | None = None) -> list:
    split = read_manifest(_manifest(data))
    paths = split.train if which == "train" else split.test
    if not paths:
        raise ValueError(f"{_manifest(data)}: the {which} split is empty")
    return [preprocess(load_motion(p), skeleton=skel) for p in paths]


def _read_motion(path, model: app.ManifoldModel) -> np.ndarray:
    m = preprocess(load_motion(path), skeleton=model.skeleton)
    T = model.hyper.delta_t
    if len(m) < T:
        raise ValueError(f"{path}: {len(m)} frames, model needs {T}")
    return m.frames[:T]


# ---------------------------------------------------------------- commands


def cmd_gen_data(a):
    skel = _skeleton(a.skeleton)
    clips = generate_synthetic(skel, a.clips, a.frames, seed=a.seed, fps=a.fps)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:04d}.json"
        save_motion(clip, out / name)
        names.append(name)
    n_test = a.test_clips
    if n_test < 0 or n_test >= len(names):
        raise ValueError(f"--test-clips must be in [0, {len(names) - 1}]")
    split = DatasetSplit(train=names[: len(names) - n_test], test=names[len(names) - n_test:])
    write_manifest(split, out / "manifest.txt")
    print(f"wrote {len(names)} clips ({len(split.train)} train, {len(split.test)} test) to {out}")


def _train_settings(a):
    hyper, config = HyperParams(), TrainConfig()
    if a.config:
        hyper, config = load_config(a.config, hyper, config)
    h_over = {k: getattr(a, k) for k in ("d_h", "d_m", "delta_t", "dropout", "sigma_z_sq", "variant")
              if getattr(a, k) is not None}
    t_over = {k: getattr(a, k) for k in ("lr", "batch_size", "epochs", "clip_norm", "seed", "checkpoint_every")
              if getattr(a, k) is not None}
    w_over = {k: getattr(a, k) for k in ("w_p", "lambda_M", "lambda_W", "lambda_G") if getattr(a, k) is not None}
    hyper = replace(hyper, **h_over)
    config = replace(config, **t_over, weights=replace(config.weights, **w_over))
    return hyper, config


def cmd_train(a):
    hyper, config = _train_settings(a)
    files = _load_split(a.data, "train")
    skel = files[0].skeleton
    hyper = replace(hyper, n_joint=skel.n_joint)

    def progress(epoch, row, state):
        log.info("epoch %d  L_R=%.4f L_ang=%.4f L_pos=%.4f L_W=%.4f", epoch, row["L_R"], row["L_ang"],
                 row["L_pos"], row["L_W"])

    result = train(files, hyper, config, out_dir=a.out, skel=skel, resume=a.resume, on_epoch=progress)
    print(f"trained {config.epochs} epochs; {len(result.checkpoints)} checkpoints and {result.csv_path}")


def cmd_eval(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    files = _load_split(a.data, a.split, model.skeleton)
    report = app.evaluate(files, model, n_eval=a.n_eval, seed=a.seed)
    report.to_csv(a.out)
    print(report.format_table())
    print(f"n_eval={report.meta['n_eval']}; report written to {a.out}")


def _write(model, motions, out, prefix):
    paths = app.save_motions(motions, model.skeleton, out, prefix)
    print(f"wrote {len(paths)} motion file(s) to {out}")


def cmd_reconstruct(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    m = _read_motion(a.input, model)
    _write(model, [model.decode(model.encode(m), a.decoder)], a.out, "reconstruction")


def cmd_sample(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    motions, _ = app.sample_random(a.n, model, a.sigma_z_sq, seed=a.seed, decoder=a.decoder)
    _write(model, motions, a.out, "sample")


def cmd_interpolate(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    ma, mb = _read_motion(a.a, model), _read_motion(a.b, model)
    _write(model, app.interpolate(ma, mb, a.steps, model, a.decoder), a.out, "interp")


def cmd_denoise(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    m = _read_motion(a.input, model)
    if a.corrupt > 0:
        m = corrupt_zero_joints(m, a.corrupt, np.random.default_rng(a.seed))
        app.save_motions([m], model.skeleton, a.out, "corrupted")
    _write(model, [app.denoise(m, model, a.decoder)], a.out, "denoised")


def cmd_analogy(a):
    model = app.ManifoldModel.from_checkpoint(a.ckpt)
    ms = [_read_motion(p, model) for p in (a.a, a.b, a.c)]
    _write(model, [app.analogy(*ms, model, decoder=a.decoder)], a.out, "analogy")


def cmd_gradcheck(a):
    if not a.double:
        raise ValueError("gradcheck needs double precision; rerun without --float32")
    report = run_gradcheck(seed=a.seed, tol=a.tol, step=a.step, max_entries=a.max_entries)
    print(report.format())
    if not report.passed:
        names = ", ".join(b.name for b in report.failures())
        raise GradCheckFailed(f"gradient check failed for: {names}")
    print(f"gradient check passed (tol {a.tol:g})")


class GradCheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motion-manifold", description="Latent motion manifold learner.")
    p.add_argument("--threads", type=int, default=None,
                   help="limit BLAS threads (1 gives bit-reproducible runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic motion dataset")
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--frames", type=int, default=_HP.delta_t, help=f"frames per clip (default {_HP.delta_t})")
    g.add_argument("--fps", type=float, default=25.0)
    g.add_argument("--skeleton", default="h36m", help="'h36m', 'tiny' or a skeleton JSON path (default h36m)")
    g.add_argument("--test-clips", type=int, default=0, help="number of clips put in the test split (default 0)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="INI config with [model], [train], [loss] sections; flags override it")
    t.add_argument("--data", required=True, help="dataset directory or manifest file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--d-h", dest="d_h", type=int, help=f"GRU hidden size (default {_HP.d_h})")
    t.add_argument("--d-m", dest="d_m", type=int, help=f"manifold size (default {_HP.d_m})")
    t.add_argument("--delta-t", dest="delta_t", type=int, help=f"clip length in frames (default {_HP.delta_t})")
    t.add_argument("--dropout", type=float, help=f"dropout rate (default {_HP.dropout})")
    t.add_argument("--sigma-z-sq", dest="sigma_z_sq", type=float, help=f"prior variance (default {_HP.sigma_z_sq})")
    t.add_argument("--variant", choices=["S", "D", "DK", "DKG", "DKGM", "DKGMZ"],
                   help=f"model variant (default {_HP.variant})")
    t.add_argument("--lr", type=float, help=f"Adam learning rate (default {_TC.lr})")
    t.add_argument("--batch-size", dest="batch_size", type=int, help=f"batch size (default {_TC.batch_size})")
    t.add_argument("--epochs", type=int, help=f"epochs (default {_TC.epochs})")
    t.add_argument("--clip-norm", dest="clip_norm", type=float,
                   help=f"global norm for GRU gradient clipping (default {_TC.clip_norm})")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   help=f"epochs between checkpoints (default {_TC.checkpoint_every})")
    t.add_argument("--seed", type=int, help=f"random seed (default {_TC.seed})")
    t.add_argument("--w-p", dest="w_p", type=float, help=f"position loss weight (default {_LW.w_p})")
    t.add_argument("--lambda-m", dest="lambda_M", type=float, help=f"manifold loss weight (default {_LW.lambda_M})")
    t.add_argument("--lambda-w", dest="lambda_W", type=float, help=f"MMD weight (default {_LW.lambda_W})")
    t.add_argument("--lambda-g", dest="lambda_G", type=float, help=f"adversarial weight (default {_LW.lambda_G})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-interval reconstruction metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--n-eval", dest="n_eval", type=int, default=30, help="motions evaluated (default 30)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="CSV report path")
    e.set_defaults(func=cmd_eval)

    def model_cmd(name, help, func, inputs):
        c = sub.add_parser(name, help=help)
        c.add_argument("--ckpt", required=True)
        for flag in inputs:
            c.add_argument(flag, required=True)
        c.add_argument("--decoder", choices=["rot", "vel"], default="rot", help="decoder used (default rot)")
        c.add_argument("--out", required=True, help="output directory")
        c.set_defaults(func=func)
        return c

    model_cmd("reconstruct", "encode and decode a motion", cmd_reconstruct, ["--input"])
    s = model_cmd("sample", "decode random manifold samples", cmd_sample, [])
    s.add_argument("--n", type=int, default=30, help="number of samples (default 30)")
    s.add_argument("--sigma-z-sq", dest="sigma_z_sq", type=float, default=None,
                   help="prior variance (default: the checkpoint's)")
    s.add_argument("--seed", type=int, default=0)
    i = model_cmd("interpolate", "interpolate two motions in latent space", cmd_interpolate, ["--a", "--b"])
    i.add_argument("--steps", type=int, default=6)
    d = model_cmd("denoise", "project a motion onto the manifold", cmd_denoise, ["--input"])
    d.add_argument("--corrupt", type=float, default=0.0,
                   help="zero joints with this probability before denoising (default 0)")
    d.add_argument("--seed", type=int, default=0)
    model_cmd("analogy", "decode enc(a) - enc(b) + enc(c)", cmd_analogy, ["--a", "--b", "--c"])

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full tiny model")
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--max-entries", dest="max_entries", type=int, default=6,
                    help="entries sampled per parameter block (default 6)")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--float32", dest="double", action="store_false", help="single precision (refused)")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        args.func(args)
    except (NonFiniteLossError, GradCheckFailed, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, ShapeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
