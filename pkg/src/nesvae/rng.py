"""Deterministic, splittable random streams.

All stochastic code in this package draws from an RngStream, a (seed, stream
path) pair backed by a counter-based Philox generator.  Identical (seed,
stream) always yields identical draws, regardless of how many other streams
were consumed in between, so results are reproducible under any degree of
parallelism.  Stream paths are tuples so that e.g. perturbation i of
iteration t can use the collision-free path (t, i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class RngStream:
    """A named, replayable random stream.

    Attributes:
        seed: base seed shared by a whole run.
        stream: path of integers identifying this stream within the run.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def child(self, *ids: int) -> "RngStream":
        """Derive a sub-stream by appending ids to the stream path."""
        return RngStream(self.seed, self.stream + ids)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def gaussian_sample(rng: RngStream, d: int) -> np.ndarray:
    """Draw d i.i.d. standard-normal values from the given stream.

    Raises DimensionError if d < 1.
    """
    if d < 1:
        raise DimensionError(f"need at least one dimension, got d={d}")
    return rng.generator().standard_normal(d)
