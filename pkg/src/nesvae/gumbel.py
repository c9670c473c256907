"""Gumbel noise, its log-density, and perturb-and-MAP sampling.

Draws follow the mean convention: a draw with location h has expectation h,
i.e. gamma = h - c - log(-log U) with c the Euler-Mascheroni constant.  The
shift is shared by every coordinate, so argmax-based sampling is unaffected
by the convention.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream
from .structures import CATEGORICAL, Graph, StructureFamily, map_solve

EULER_GAMMA = float(np.euler_gamma)

# keeps log(-log U) finite when the uniform draw hits 0 or 1 exactly
_UNIFORM_CLAMP = 1e-12


def standard_gumbel(gen: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean Gumbel draws from an already-positioned generator."""
    u = np.clip(gen.uniform(size=shape), _UNIFORM_CLAMP,
                1.0 - _UNIFORM_CLAMP)
    return -EULER_GAMMA - np.log(-np.log(u))


def sample_gumbel(rng: RngStream, location: np.ndarray,
                  size: int | None = None) -> np.ndarray:
    """Independent Gumbel draws with per-coordinate mean `location`.

    With `size` given, returns a (size, len(location)) matrix of draws.
    """
    location = np.asarray(location, dtype=np.float64)
    shape = location.shape if size is None else (size,) + location.shape
    return location + standard_gumbel(rng.generator(), shape)


def gumbel_log_density(value, location):
    """Log-density of the mean-`location` Gumbel at `value` (elementwise)."""
    t = np.asarray(value, dtype=np.float64) + EULER_GAMMA - location
    return -(t + np.exp(-t))


def gumbel_log_density_dlocation(value, location):
    """Derivative of the log-density with respect to the location."""
    t = np.asarray(value, dtype=np.float64) + EULER_GAMMA - location
    return 1.0 - np.exp(-t)


def perturb_and_map(family: StructureFamily, graph: Graph | None,
                    scores: np.ndarray, rng: RngStream) -> np.ndarray:
    """Sample a structure: perturb scores with Gumbel noise, then solve MAP.

    For the categorical family this draws exactly from softmax(scores); for
    structured families it draws from the perturb-and-MAP distribution.
    """
    gamma = sample_gumbel(rng, np.asarray(scores, dtype=np.float64))
    return map_solve(family, graph, gamma)


def perturb_and_map_many(family: StructureFamily, graph: Graph | None,
                         scores: np.ndarray, rng: RngStream,
                         size: int) -> np.ndarray:
    """Matrix of `size` independent perturb-and-MAP samples, one per row."""
    gammas = sample_gumbel(rng, np.asarray(scores, dtype=np.float64),
                           size=size)
    if family.kind == CATEGORICAL:
        z = np.zeros_like(gammas, dtype=np.int8)
        z[np.arange(size), np.argmax(gammas, axis=1)] = 1
        return z
    return np.stack([map_solve(family, graph, g) for g in gammas])


def categorical_gumbel_argmax(scores: np.ndarray, rng: RngStream,
                              size: int | None = None):
    """Index of the largest Gumbel-perturbed score; softmax-distributed.

    With `size` given, returns an int array of independent draws.
    """
    gamma = sample_gumbel(rng, np.asarray(scores, dtype=np.float64),
                          size=size)
    return np.argmax(gamma, axis=-1) if size is not None \
        else int(np.argmax(gamma))
