"""Velocity-decoupled 4D Gaussian splatting on the CPU.

4D Gaussians are sliced at a query time into 3D Gaussians whose covariance
comes from the temporal Schur complement and whose mean follows a learned,
piecewise-linear velocity field.  The package bundles the small linear
algebra kernels, the velocity track, a deformation MLP, a differentiable
splatting renderer, a training loop, synthetic scenes and a CLI.
"""

from .errors import (CheckpointError, ConfigurationError, DegenerateTemporalError, DivergenceError,
                     InvalidParameterError, ShearSplatError)
from .motion import VelocityTrack, displacement, velocity_at
from .deform import DeformNet, EncodingConfig
from .render import Camera, Frame, Gaussian4D, GaussianSet, SceneModel, render, render_backward
from .training import FitConfig, fit, loss, psnr, ssim
from .scenes import RunConfig, SceneSpec, init_model, load_dataset, parse_scene, synth_scene
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "DegenerateTemporalError", "DivergenceError",
    "InvalidParameterError", "ShearSplatError", "VelocityTrack", "displacement", "velocity_at",
    "DeformNet", "EncodingConfig", "Camera", "Frame", "Gaussian4D", "GaussianSet", "SceneModel",
    "render", "render_backward", "FitConfig", "fit", "loss", "psnr", "ssim", "RunConfig", "SceneSpec",
    "init_model", "load_dataset", "parse_scene", "synth_scene", "load_checkpoint", "save_checkpoint",
]
