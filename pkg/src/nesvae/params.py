"""Flat parameter vectors with named segments.

A model's trainable parameters live in one float64 vector; a SegmentLayout
names contiguous slices of it (e.g. "encoder", "decoder") so sub-networks can
be addressed without copying the whole vector around.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered (name, length) map describing slices of a flat vector."""

    segments: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [n for n, _ in self.segments]
        if len(set(names)) != len(names):
            raise DimensionError(f"duplicate segment names in {names}")
        for name, length in self.segments:
            if length < 0:
                raise DimensionError(f"segment {name!r} has negative length")

    @property
    def total(self) -> int:
        return sum(length for _, length in self.segments)

    def slice_of(self, name: str) -> slice:
        offset = 0
        for seg_name, length in self.segments:
            if seg_name == name:
                return slice(offset, offset + length)
            offset += length
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for n, _ in self.segments]


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus its segment layout.

    Treated as immutable during an optimization generation: updates build a
    new ParamVector rather than mutating in place.
    """

    values: np.ndarray
    layout: SegmentLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError("parameter values must be a 1-D vector")
        if self.values.shape[0] != self.layout.total:
            raise DimensionError(
                f"vector length {self.values.shape[0]} != layout total "
                f"{self.layout.total}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def segment(self, name: str) -> np.ndarray:
        """Read-only view of one named segment."""
        view = self.values[self.layout.slice_of(name)]
        view.flags.writeable = False
        return view

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def with_segment(self, name: str, seg_values: np.ndarray) -> "ParamVector":
        sl = self.layout.slice_of(name)
        seg_values = np.asarray(seg_values, dtype=np.float64)
        if seg_values.shape[0] != sl.stop - sl.start:
            raise DimensionError(
                f"segment {name!r} expects length {sl.stop - sl.start}, "
                f"got {seg_values.shape[0]}")
        out = self.values.copy()
        out[sl] = seg_values
        return ParamVector(out, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def concat_segments(named: list[tuple[str, np.ndarray]]) -> ParamVector:
    """Build a ParamVector from (name, values) pairs; order is preserved."""
    layout = SegmentLayout(tuple((n, len(v)) for n, v in named))
    if named:
        values = np.concatenate([np.asarray(v, dtype=np.float64)
                                 for _, v in named])
    else:
        values = np.zeros(0)
    return ParamVector(values, layout)
