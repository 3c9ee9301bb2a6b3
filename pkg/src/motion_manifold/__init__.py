"""Latent motion manifold learning with a GRU autoencoder and differentiable kinematics."""
from .applications import ManifoldModel, analogy, denoise, evaluate, interpolate, sample_random
from .data import MotionFile, generate_synthetic, load_motion, preprocess, save_motion
from .kinematics import Skeleton, exp_to_rotmat, fk_forward, h36m_skeleton, rotmat_to_exp, tiny_skeleton
from .model import HyperParams, ModelParams
from .training import TrainConfig, train

__all__ = [
    "HyperParams", "ManifoldModel", "ModelParams", "MotionFile", "Skeleton", "TrainConfig",
    "analogy", "denoise", "evaluate", "generate_synthetic", "exp_to_rotmat", "fk_forward", "h36m_skeleton", "interpolate",
    "load_motion", "preprocess", "rotmat_to_exp", "sample_random", "save_motion", "tiny_skeleton", "train",
]
__version__ = "0.1.0"
