"""Parameter vectors, random streams, and the MLP kernel."""

import numpy as np
import pytest

from nesvae.errors import DimensionError
from nesvae.mlp import MlpSpec, init_mlp_params, mlp_backward, mlp_forward
from nesvae.params import ParamVector, SegmentLayout, concat_segments
from nesvae.rng import RngStream, gaussian_sample


class TestGaussianSample:
    def test_moments(self):
        """10^6 standard-normal draws: mean 0 +- 0.01, variance 1 +- 0.02."""
        draws = gaussian_sample(RngStream(123), 1_000_000)
        assert abs(draws.mean()) < 0.01
        assert abs(draws.var() - 1.0) < 0.02

    def test_determinism(self):
        """Same (seed, stream) yields bit-identical vectors."""
        a = gaussian_sample(RngStream(7, (1, 2)), 64)
        b = gaussian_sample(RngStream(7, (1, 2)), 64)
        assert (a == b).all()

    def test_streams_differ(self):
        a = gaussian_sample(RngStream(7, (1,)), 64)
        b = gaussian_sample(RngStream(7, (2,)), 64)
        assert not (a == b).all()

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            gaussian_sample(RngStream(0), 0)

    def test_child_streams(self):
        rng = RngStream(5)
        assert rng.child(3, 1) == RngStream(5, (3, 1))
        assert rng.child(3).child(1) == RngStream(5, (3, 1))


class TestParamVector:
    def test_segment_roundtrip(self):
        """Slicing segments out and writing them back is the identity."""
        pv = concat_segments([("encoder", np.arange(4.0)),
                              ("decoder", np.arange(3.0) + 10)])
        assert pv.dim == 7
        rebuilt = pv.with_segment("encoder", pv.segment("encoder"))
        rebuilt = rebuilt.with_segment("decoder", pv.segment("decoder"))
        assert (rebuilt.values == pv.values).all()

    def test_total_length_checked(self):
        layout = SegmentLayout((("a", 2), ("b", 2)))
        with pytest.raises(DimensionError):
            ParamVector(np.zeros(3), layout)

    def test_segments_are_readonly_views(self):
        pv = concat_segments([("a", np.zeros(3))])
        seg = pv.segment("a")
        with pytest.raises(ValueError):
            seg[0] = 1.0

    def test_wrong_segment_length_rejected(self):
        pv = concat_segments([("a", np.zeros(3))])
        with pytest.raises(DimensionError):
            pv.with_segment("a", np.zeros(4))


def reference_forward(spec, params, x):
    """Independent re-implementation: explicit per-layer loops."""
    offset = 0
    a = np.asarray(x, dtype=float)
    n_layers = len(spec.widths) - 1
    for layer in range(n_layers):
        fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
        w = params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        z = np.array([w[o] @ a + b[o] for o in range(fan_out)])
        if layer < n_layers - 1:
            a = np.maximum(z, 0) if spec.activation == "relu" else np.tanh(z)
        else:
            a = z
    return a


def fd_param_gradient(spec, params, x, cot, step=1e-5):
    grad = np.zeros_like(params)
    for i in range(len(params)):
        up, down = params.copy(), params.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (cot @ mlp_forward(spec, up, x)
                   - cot @ mlp_forward(spec, down, x)) / (2 * step)
    return grad


class TestMlpForward:
    def test_zero_params_zero_output(self):
        spec = MlpSpec((3, 4, 2))
        out = mlp_forward(spec, np.zeros(spec.param_count()), np.ones(3))
        assert (out == 0).all()

    def test_identity_linear_layer(self):
        spec = MlpSpec((3, 3))
        params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        x = np.array([1.5, -2.0, 0.25])
        assert (mlp_forward(spec, params, x) == x).all()

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_reference(self, activation):
        """Vectorized forward equals the loop re-implementation to 1e-12."""
        spec = MlpSpec((4, 6, 3), activation)
        params = init_mlp_params(spec, RngStream(11))
        x = RngStream(12).generator().standard_normal(4)
        np.testing.assert_allclose(mlp_forward(spec, params, x),
                                   reference_forward(spec, params, x),
                                   atol=1e-12)

    def test_batch_matches_single(self):
        spec = MlpSpec((4, 5, 2), "tanh")
        params = init_mlp_params(spec, RngStream(21))
        xs = RngStream(22).generator().standard_normal((6, 4))
        batched = mlp_forward(spec, params, xs)
        for i, x in enumerate(xs):
            np.testing.assert_allclose(batched[i], mlp_forward(spec, params, x))

    def test_shape_mismatch(self):
        spec = MlpSpec((4, 2))
        with pytest.raises(DimensionError):
            mlp_forward(spec, np.zeros(spec.param_count()), np.zeros(3))


class TestMlpBackward:
    def test_linear_scalar_weight_gradient_is_input(self):
        """d(w.x)/dw = x for a single linear layer with scalar output."""
        spec = MlpSpec((3, 1))
        params = init_mlp_params(spec, RngStream(31))
        x = np.array([0.5, -1.0, 2.0])
        grad = mlp_backward(spec, params, x, np.array([1.0]))
        np.testing.assert_allclose(grad[:3], x)
        assert grad[3] == 1.0  # bias

    def test_zero_cotangent(self):
        spec = MlpSpec((3, 4, 2))
        params = init_mlp_params(spec, RngStream(32))
        grad = mlp_backward(spec, params, np.ones(3), np.zeros(2))
        assert (grad == 0).all()

    def test_matches_finite_differences(self):
        """Reverse pass vs central differences, relative error < 1e-6."""
        spec = MlpSpec((3, 5, 4, 2), "tanh")
        params = init_mlp_params(spec, RngStream(33))
        gen = RngStream(34).generator()
        x = gen.standard_normal(3)
        cot = gen.standard_normal(2)
        grad = mlp_backward(spec, params, x, cot)
        fd = fd_param_gradient(spec, params, x, cot)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert np.max(np.abs(grad - fd) / denom) < 1e-6

    def test_random_specs_match_fd(self):
        """100 random points across random specs agree with FD to 1e-5.

        tanh only: relu's kink makes finite differences unreliable at
        activations near zero.
        """
        gen = RngStream(35).generator()
        checked = 0
        while checked < 100:
            widths = tuple(int(gen.integers(1, 5)) for _ in range(3))
            spec = MlpSpec(widths, "tanh")
            params = gen.standard_normal(spec.param_count())
            x = gen.standard_normal(widths[0])
            cot = gen.standard_normal(widths[-1])
            grad = mlp_backward(spec, params, x, cot)
            fd = fd_param_gradient(spec, params, x, cot)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)
            checked += 1

    def test_batched_rows_match_single(self):
        spec = MlpSpec((3, 4, 2), "relu")
        params = init_mlp_params(spec, RngStream(36))
        gen = RngStream(37).generator()
        xs = gen.standard_normal((5, 3))
        cots = gen.standard_normal((5, 2))
        rows = mlp_backward(spec, params, xs, cots)
        for i in range(5):
            np.testing.assert_allclose(
                rows[i], mlp_backward(spec, params, xs[i], cots[i]))
