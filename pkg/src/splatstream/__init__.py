"""Streaming Gaussian-splatting training engine.

Renders a growable map of anisotropic 3D Gaussians with a tile-based
differentiable rasterizer, trains it against a stream of posed keyframes,
and exposes two interchangeable backward passes (pixel-wise and bucketed
splat-wise) plus a loss-adaptive keyframe scheduler and opacity-regularized
densification.
"""

from splatstream.core import (
    Camera,
    GaussianMap,
    GaussianPrimitive,
    build_covariance,
    logistic,
    logit,
)
from splatstream.sh import eval_sh
from splatstream.rasterizer import (
    ParamGrads,
    Projected2D,
    RasterOpts,
    RenderOutput,
    backward_pixelwise,
    backward_splatwise,
    project_gaussian,
    rasterize_forward,
)
from splatstream.losses import (
    LossBreakdown,
    compute_losses,
    opacity_reg,
    psnr,
    rendered_loss,
    ssim_metric,
    total_loss,
)
from splatstream.scheduler import KeyframeScheduler
from splatstream.densify import DensifyConfig, densify_and_prune, seed_from_points
from splatstream.optimizer import AdamState, adam_step, resize_for_densify
from splatstream.trainer import TrainConfig, TrainReport, render_trajectory, run_stream

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Camera",
    "DensifyConfig",
    "GaussianMap",
    "GaussianPrimitive",
    "KeyframeScheduler",
    "LossBreakdown",
    "ParamGrads",
    "Projected2D",
    "RasterOpts",
    "RenderOutput",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "backward_pixelwise",
    "backward_splatwise",
    "build_covariance",
    "compute_losses",
    "densify_and_prune",
    "eval_sh",
    "logistic",
    "logit",
    "opacity_reg",
    "project_gaussian",
    "psnr",
    "rasterize_forward",
    "render_trajectory",
    "rendered_loss",
    "resize_for_densify",
    "run_stream",
    "seed_from_points",
    "ssim_metric",
    "total_loss",
]
