"""Synthetic datasets with known latent structure, plus persistence.

The main generator draws, per sample, a uniformly random spanning tree
(via a random Pruefer sequence) and diffuses node signals along it, so the
observed trajectories carry information about the hidden tree.  A second
generator produces clustered vectors with a categorical latent, used by the
small enumerable tasks.

Files are binary: magic, version, little-endian integer header, float64
trajectory payload, uint8 indicators.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError, DimensionError
from .rng import RngStream
from .structures import (
    FAMILY_KINDS,
    Graph,
    StructureFamily,
    categorical_family,
    complete_graph,
    indicator_length,
    spanning_tree_family,
)

_MAGIC = b"NESVAEDS"
_VERSION = 1

DIFFUSION_RATE = 0.1


@dataclass
class TrajectoryDataset:
    """Samples of (signal matrix, true structure) plus generator settings."""

    samples: list[tuple[np.ndarray, np.ndarray]]
    family: StructureFamily
    graph: Graph | None
    seed: int
    noise: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def num_samples(self) -> int:
        return len(self.samples)

    @property
    def signal_shape(self) -> tuple[int, int]:
        return self.samples[0][0].shape

    def inputs(self) -> np.ndarray:
        """Flattened inputs, one row per sample, time-major.

        The first n entries of a row are timestep 0 (the decoder context),
        followed by the remaining timesteps.
        """
        return np.stack([traj.T.reshape(-1) for traj, _ in self.samples])

    def truths(self) -> np.ndarray:
        return np.stack([z for _, z in self.samples])


def random_spanning_tree(n: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform random spanning tree of the complete graph on n vertices.

    Decodes a uniform Pruefer sequence, so all n^(n-2) labeled trees are
    equally likely.  Returns the indicator over complete_graph(n) edges.
    """
    if n < 2:
        raise DimensionError("a spanning tree needs at least 2 vertices")
    graph = complete_graph(n)
    index = graph.edge_index()
    z = np.zeros(graph.m, dtype=np.int8)
    if n == 2:
        z[0] = 1
        return z
    seq = gen.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=np.int64)
    for v in seq:
        degree[v] += 1
    leaf_ready = [v for v in range(n) if degree[v] == 1]
    heapq.heapify(leaf_ready)
    for v in seq:
        leaf = heapq.heappop(leaf_ready)
        z[index[(min(leaf, v), max(leaf, v))]] = 1
        degree[v] -= 1
        if degree[v] == 1:
            heapq.heappush(leaf_ready, v)
    u, v = heapq.heappop(leaf_ready), heapq.heappop(leaf_ready)
    z[index[(min(u, v), max(u, v))]] = 1
    return z


def gen_latent_tree_dataset(n: int, steps: int, samples: int, noise: float,
                            rng: RngStream,
                            alpha: float = DIFFUSION_RATE) -> TrajectoryDataset:
    """Diffusion-on-a-hidden-tree trajectories.

    Per sample: draw a uniform spanning tree, i.i.d. standard-normal initial
    node values, then iterate
    x[t+1](v) = x[t](v) + alpha * sum over tree edges (u,v) of
    (x[t](u) - x[t](v)) plus Gaussian noise.
    """
    if n < 2:
        raise DimensionError("need at least 2 vertices")
    if steps < 1 or samples < 1:
        raise DimensionError("steps and samples must be >= 1")
    graph = complete_graph(n)
    family = spanning_tree_family()
    out = []
    for i in range(samples):
        gen = rng.child(i).generator()
        z = random_spanning_tree(n, gen)
        traj = np.empty((n, steps))
        traj[:, 0] = gen.standard_normal(n)
        neighbors = [graph.edges[j] for j in np.flatnonzero(z)]
        for t in range(1, steps):
            prev = traj[:, t - 1]
            nxt = prev.copy()
            for u, v in neighbors:
                nxt[v] += alpha * (prev[u] - prev[v])
                nxt[u] += alpha * (prev[v] - prev[u])
            if noise > 0:
                nxt += noise * gen.standard_normal(n)
            traj[:, t] = nxt
        out.append((traj, z))
    return TrajectoryDataset(out, family, graph, rng.seed, noise,
                             meta={"alpha": alpha})


def gen_cluster_dataset(k: int, dim: int, samples: int, rng: RngStream,
                        spread: float = 3.0,
                        noise: float = 0.5) -> TrajectoryDataset:
    """Gaussian-cluster vectors with a one-hot categorical latent."""
    if k < 1 or dim < 1 or samples < 1:
        raise DimensionError("k, dim and samples must be >= 1")
    means = rng.child(0).generator().standard_normal((k, dim)) * spread
    out = []
    for i in range(samples):
        gen = rng.child(1 + i).generator()
        label = int(gen.integers(0, k))
        x = means[label] + noise * gen.standard_normal(dim)
        z = np.zeros(k, dtype=np.int8)
        z[label] = 1
        out.append((x.reshape(dim, 1), z))
    return TrajectoryDataset(out, categorical_family(k), None, rng.seed,
                             noise, meta={"spread": spread, "means_seed": 0})


def edge_f1(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Harmonic mean of edge precision and recall between two indicators."""
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if predicted.shape != truth.shape:
        raise DimensionError("indicator shapes differ")
    tp = float(np.sum(predicted & truth))
    np_, nt = float(predicted.sum()), float(truth.sum())
    if np_ == 0.0 and nt == 0.0:
        return 1.0
    if tp == 0.0:
        return 0.0
    precision, recall = tp / np_, tp / nt
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(ds: TrajectoryDataset, path) -> None:
    n_signals, steps = ds.signal_shape
    ind_len = indicator_length(ds.family, ds.graph)
    kind_id = FAMILY_KINDS.index(ds.family.kind)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack(
            "<IIIB", kind_id,
            ds.family.num_categories or 0,
            ds.family.subset_size or 0,
            1 if ds.family.single_root else 0))
        if ds.graph is None:
            fh.write(struct.pack("<IiBi", 0, 0, 0, -1))
        else:
            fh.write(struct.pack("<IiBi", ds.graph.n, ds.graph.m,
                                 1 if ds.graph.directed else 0,
                                 -1 if ds.graph.root is None
                                 else ds.graph.root))
            for u, v in ds.graph.edges:
                fh.write(struct.pack("<II", u, v))
        fh.write(struct.pack("<qdd", ds.seed, ds.noise,
                             float(ds.meta.get("alpha", 0.0))))
        fh.write(struct.pack("<IIII", ds.num_samples, n_signals, steps,
                             ind_len))
        for traj, z in ds.samples:
            fh.write(np.ascontiguousarray(traj, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(z, dtype=np.uint8).tobytes())


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise DatasetFormatError("truncated dataset file")
    return buf


def load_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise DatasetFormatError("bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        kind_id, num_cat, subset, single_root = struct.unpack(
            "<IIIB", _read_exact(fh, 13))
        if kind_id >= len(FAMILY_KINDS):
            raise DatasetFormatError(f"unknown family id {kind_id}")
        family = StructureFamily(
            FAMILY_KINDS[kind_id],
            num_categories=num_cat or None,
            subset_size=subset if FAMILY_KINDS[kind_id] == "edge_subset"
            else None,
            single_root=bool(single_root))
        gn, gm, directed, root = struct.unpack("<IiBi", _read_exact(fh, 13))
        graph = None
        if gn:
            edges = []
            for _ in range(gm):
                edges.append(struct.unpack("<II", _read_exact(fh, 8)))
            graph = Graph(gn, tuple(edges), directed=bool(directed),
                          root=None if root < 0 else root)
        seed, noise, alpha = struct.unpack("<qdd", _read_exact(fh, 24))
        num, n_signals, steps, ind_len = struct.unpack(
            "<IIII", _read_exact(fh, 16))
        samples = []
        for _ in range(num):
            traj = np.frombuffer(
                _read_exact(fh, 8 * n_signals * steps),
                dtype="<f8").reshape(n_signals, steps).copy()
            z = np.frombuffer(_read_exact(fh, ind_len),
                              dtype=np.uint8).astype(np.int8)
            samples.append((traj, z))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after payload")
    return TrajectoryDataset(samples, family, graph, seed, noise,
                             meta={"alpha": alpha})
