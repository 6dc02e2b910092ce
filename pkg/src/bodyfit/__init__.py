"""Differentiable articulated body model and 2D-to-3D fitting toolkit.

The package covers the full desk-scale pipeline:

- ``rotation``: axis-angle rotations, analytic Jacobians, log map
- ``model``: blendshaped, skinned body model with hand-written gradients
- ``renderer``: weak-perspective projection and a soft silhouette rasterizer
- ``losses``: supervision objectives with gradients
- ``nnet``: minimal trainable-layer library with rmsprop
- ``priors``: pose / shape prediction networks and their training loops
- ``datagen``: deterministic synthetic dataset generation
- ``fitter``: robust anchored model fitting to 2D evidence
- ``metrics``: evaluation measures
- ``cli``: command line entry points binding it all together
"""

from . import datagen, fitter, losses, metrics, model, nnet, priors, renderer, rotation
from .errors import DataIOError, DegenerateInputError, EndOfDataError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "DataIOError",
    "DegenerateInputError",
    "EndOfDataError",
    "NumericalError",
    "ValidationError",
    "datagen",
    "fitter",
    "losses",
    "metrics",
    "model",
    "nnet",
    "priors",
    "renderer",
    "rotation",
]
