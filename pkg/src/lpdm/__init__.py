"""Low-light post-processing diffusion model.

A conditional noise predictor trained on paired under-/normally-exposed
images, used after any low-light enhancer to detect and subtract residual
degradation in a single forward pass.
"""
from .model import UNet, UNetConfig
from .postprocess import PostprocessConfig, estimate_noise, postprocess_image
from .schedule import DiffusionSchedule, build_linear_schedule, correct, estimate_x0, q_sample

__all__ = [
    "DiffusionSchedule", "build_linear_schedule", "q_sample", "estimate_x0", "correct",
    "UNet", "UNetConfig", "PostprocessConfig", "estimate_noise", "postprocess_image",
]
__version__ = "0.1.0"
