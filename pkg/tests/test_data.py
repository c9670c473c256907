"""Synthetic dataset generation and the binary file format."""

import math

import numpy as np
import pytest

from nesvae.data import (
    TrajectoryDataset,
    edge_f1,
    gen_cluster_dataset,
    gen_latent_tree_dataset,
    load_dataset,
    random_spanning_tree,
    save_dataset,
)
from nesvae.errors import DatasetFormatError
from nesvae.rng import RngStream
from nesvae.structures import (
    complete_graph,
    enumerate_structures,
    spanning_tree_family,
    validate_structure,
)


class TestRandomSpanningTree:
    def test_uniform_over_labeled_trees(self):
        """n=4 has 16 labeled trees; each frequency is within 4 binomial
        standard errors of 1/16 over 10^5 draws."""
        gen = RngStream(1).generator()
        n_draws = 100_000
        counts: dict = {}
        for _ in range(n_draws):
            z = random_spanning_tree(4, gen)
            counts[tuple(z)] = counts.get(tuple(z), 0) + 1
        trees = enumerate_structures(spanning_tree_family(),
                                     complete_graph(4))
        assert len(counts) == len(trees) == 16
        p = 1.0 / 16.0
        se = math.sqrt(p * (1 - p) / n_draws)
        for count in counts.values():
            assert abs(count / n_draws - p) <= 4 * se

    def test_two_vertices(self):
        z = random_spanning_tree(2, RngStream(2).generator())
        assert list(z) == [1]

    def test_always_valid(self):
        gen = RngStream(3).generator()
        fam = spanning_tree_family()
        for n in (2, 3, 5, 8):
            g = complete_graph(n)
            for _ in range(50):
                assert validate_structure(fam, g, random_spanning_tree(n, gen))


class TestTreeDataset:
    def test_deterministic_given_seed(self):
        a = gen_latent_tree_dataset(5, 6, 20, 0.05, RngStream(4))
        b = gen_latent_tree_dataset(5, 6, 20, 0.05, RngStream(4))
        for (xa, za), (xb, zb) in zip(a.samples, b.samples):
            assert (xa == xb).all() and (za == zb).all()

    def test_structures_valid_and_finite(self):
        ds = gen_latent_tree_dataset(6, 10, 30, 0.1, RngStream(5))
        fam = spanning_tree_family()
        for traj, z in ds.samples:
            assert validate_structure(fam, ds.graph, z)
            assert np.isfinite(traj).all()

    def test_noiseless_diffusion_contracts(self):
        """Without noise the node spread never grows: the update matrix is
        row-stochastic for rate * max degree <= 1."""
        ds = gen_latent_tree_dataset(6, 12, 10, 0.0, RngStream(6))
        for traj, _ in ds.samples:
            spreads = traj.max(axis=0) - traj.min(axis=0)
            assert all(b <= a + 1e-12 for a, b in zip(spreads, spreads[1:]))

    def test_inputs_layout_time_major(self):
        """Row layout: timestep 0 first (the decoder context)."""
        ds = gen_latent_tree_dataset(4, 3, 2, 0.0, RngStream(7))
        x = ds.inputs()[0]
        traj = ds.samples[0][0]
        np.testing.assert_array_equal(x[:4], traj[:, 0])
        np.testing.assert_array_equal(x[4:8], traj[:, 1])


class TestClusterDataset:
    def test_one_hot_truth(self):
        ds = gen_cluster_dataset(5, 3, 25, RngStream(8))
        for x, z in ds.samples:
            assert x.shape == (3, 1)
            assert z.sum() == 1

    def test_clusters_separate(self):
        """Points sit nearer their own cluster mean than others."""
        ds = gen_cluster_dataset(4, 6, 60, RngStream(9), spread=4.0,
                                 noise=0.3)
        X = ds.inputs()
        labels = ds.truths().argmax(axis=1)
        means = np.stack([X[labels == c].mean(axis=0) for c in range(4)])
        dists = np.linalg.norm(X[:, None, :] - means[None], axis=2)
        assert (dists.argmin(axis=1) == labels).mean() > 0.95


class TestEdgeF1:
    def test_identical_trees(self):
        z = np.array([1, 0, 1, 0, 1])
        assert edge_f1(z, z) == 1.0

    def test_disjoint_edge_sets(self):
        assert edge_f1(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1])) == 0.0

    def test_four_of_five_shared(self):
        """Trees sharing 4 of 5 edges: precision = recall = 4/5, F1 0.8."""
        a = np.array([1, 1, 1, 1, 1, 0, 0])
        b = np.array([1, 1, 1, 1, 0, 1, 0])
        assert edge_f1(a, b) == pytest.approx(0.8)


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path):
        ds = gen_latent_tree_dataset(5, 7, 12, 0.08, RngStream(10))
        path = tmp_path / "ds.nvds"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.family == ds.family
        assert back.graph == ds.graph
        assert back.seed == ds.seed and back.noise == ds.noise
        for (xa, za), (xb, zb) in zip(ds.samples, back.samples):
            assert (xa == xb).all() and (za == zb).all()

    def test_categorical_roundtrip(self, tmp_path):
        ds = gen_cluster_dataset(4, 3, 9, RngStream(11))
        path = tmp_path / "ds.nvds"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.family == ds.family and back.graph is None
        np.testing.assert_array_equal(back.inputs(), ds.inputs())

    def test_file_bytes_deterministic(self, tmp_path):
        ds = gen_latent_tree_dataset(4, 5, 6, 0.02, RngStream(12))
        p1, p2 = tmp_path / "a.nvds", tmp_path / "b.nvds"
        save_dataset(ds, p1)
        save_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        ds = gen_latent_tree_dataset(4, 5, 6, 0.02, RngStream(13))
        path = tmp_path / "ds.nvds"
        save_dataset(ds, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.nvds"
        path.write_bytes(b"NOTADATASET" + b"\0" * 64)
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_bad_version_rejected(self, tmp_path):
        ds = gen_cluster_dataset(3, 3, 4, RngStream(14))
        path = tmp_path / "ds.nvds"
        save_dataset(ds, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 99  # version field follows the 8-byte magic
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError):
            load_dataset(path)
