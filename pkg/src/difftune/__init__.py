"""Diffusion-feedback representation tuning at desk scale.

A frozen conditional denoiser scores how well an image encoder's tokens
support reconstructing the image; backpropagating that score sharpens the
encoder. Includes the tensor/autodiff core, the diffusion machinery, both
training phases, a synthetic fine-grained benchmark, and a CLI.
"""

from .tensor import Tape, Tensor, backward, finite_diff_check, sample_gaussian
from .rng import RngStream

__all__ = [
    "Tape",
    "Tensor",
    "RngStream",
    "backward",
    "finite_diff_check",
    "sample_gaussian",
]

__version__ = "0.1.0"
