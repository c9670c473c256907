"""Gradient-free training of discrete structured variational auto-encoders.

The package couples combinatorial MAP solvers (maximum spanning trees,
arborescences, projective dependency parses) with perturb-and-MAP sampling
and an evolution-strategies optimizer that needs forward passes only, plus
score-function baselines and numerical checks of the optimizer's
convergence theory.
"""

from .errors import NesVaeError
from .params import ParamVector, SegmentLayout
from .rng import RngStream, gaussian_sample

__all__ = [
    "NesVaeError",
    "ParamVector",
    "RngStream",
    "SegmentLayout",
    "gaussian_sample",
]

__version__ = "0.1.0"
