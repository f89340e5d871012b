"""Conditional denoising-diffusion inverse design of hyperelastic microstructures."""

__version__ = "0.1.0"

from . import context, dataset, diffusion, fem, pipeline, surrogate, training, unet  # noqa: F401
