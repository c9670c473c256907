"""Small dense MLP with explicit forward and reverse passes.

Parameters for a spec with widths [w0, w1, ..., wL] are packed per layer as
the row-major weight matrix (w_l x w_{l-1}) followed by the bias (w_l).
Hidden layers apply the activation; the last layer is linear.  The reverse
pass exists only for the score-function baselines; the evolution-strategies
path never differentiates anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import RngStream

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus the hidden-layer nonlinearity."""

    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {ACTIVATIONS}, "
                f"got {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths, self.widths[1:]))


def init_mlp_params(spec: MlpSpec, rng: RngStream, scale: float = 1.0) -> np.ndarray:
    """Draw initial parameters: W ~ N(0, scale^2 / fan_in), biases zero."""
    gen = rng.generator()
    chunks = []
    for fan_in, fan_out in zip(spec.widths, spec.widths[1:]):
        w = gen.standard_normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in))
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _unpack(spec: MlpSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count(),):
        raise DimensionError(
            f"expected {spec.param_count()} parameters, got {params.shape}")
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.widths, spec.widths[1:]):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass.

    Accepts a single input (in_dim,) or a batch (batch, in_dim) and returns
    the matching output shape.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise DimensionError(
            f"input width {x.shape[-1]} != first layer width {spec.in_dim}")
    a = x
    layers = _unpack(spec, params)
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        a = z if i == len(layers) - 1 else _act(spec.activation, z)
    return a[0] if single else a


def mlp_backward(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
                 cotangent: np.ndarray) -> np.ndarray:
    """Gradient of cotangent . output with respect to the parameters.

    For batched x (batch, in_dim) and cotangent (batch, out_dim) the result
    holds one gradient row per sample, shape (batch, param_count).
    """
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        cotangent = cotangent[None, :]
    if x.shape[1] != spec.in_dim:
        raise DimensionError(
            f"input width {x.shape[1]} != first layer width {spec.in_dim}")
    if cotangent.shape != (x.shape[0], spec.out_dim):
        raise DimensionError(
            f"cotangent shape {cotangent.shape} != "
            f"({x.shape[0]}, {spec.out_dim})")

    layers = _unpack(spec, params)
    acts = [x]
    pre = []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == len(layers) - 1 else _act(spec.activation, z)
        acts.append(a)

    batch = x.shape[0]
    grads = [np.empty(0)] * len(layers)
    delta = cotangent
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw = np.einsum("bo,bi->boi", delta, acts[i])
        grads[i] = np.concatenate(
            [gw.reshape(batch, -1), delta], axis=1)
        if i > 0:
            delta = (delta @ w) * _act_grad(spec.activation, pre[i - 1],
                                            acts[i])
    out = np.concatenate(grads, axis=1)
    return out[0] if single else out
