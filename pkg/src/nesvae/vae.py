"""Discrete structured variational auto-encoder.

The encoder MLP maps an input vector to one real score per edge (or per
category).  Sampling a structure is perturb-and-MAP over those scores.  The
decoder MLP sees structure-conditioned features plus a context slice of the
input and reconstructs the remaining coordinates under a unit-variance
Gaussian likelihood.

Two ELBO paths exist side by side: a Monte-Carlo path whose KL term is the
sampled approximation mean(z' h) + log |Z|, and an exact path that
enumerates the structure space, which serves as the oracle in tests.  The
two KL values agree only in special cases (the sampled form is an
approximation); both are exposed rather than reconciled.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    CheckpointFormatError,
    DimensionError,
    InvalidStructureError,
    NonFiniteFitnessError,
)
from .gumbel import perturb_and_map, perturb_and_map_many
from .mlp import MlpSpec, init_mlp_params, mlp_forward
from .params import ParamVector, SegmentLayout, concat_segments
from .rng import RngStream
from .structures import (
    CATEGORICAL,
    DEFAULT_ENUMERATION_CAP,
    Graph,
    StructureFamily,
    count_structures,
    enumerate_structures,
    indicator_length,
    validate_structure,
)

ENCODER_SEGMENT = "encoder"
DECODER_SEGMENT = "decoder"

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VaeModel:
    """Encoder/decoder specs, the structure family, and all parameters.

    context_dim leading entries of each input vector are fed to the decoder
    verbatim; the rest is the reconstruction target.  For edge families the
    context holds one value per graph vertex so structure features can
    aggregate it along selected edges.
    """

    encoder: MlpSpec
    decoder: MlpSpec
    family: StructureFamily
    graph: Graph | None
    context_dim: int
    params: ParamVector

    def __post_init__(self):
        k = indicator_length(self.family, self.graph)
        if self.encoder.out_dim != k:
            raise DimensionError(
                f"encoder emits {self.encoder.out_dim} scores, family "
                f"needs {k}")
        if self.family.kind != CATEGORICAL and self.context_dim != self.graph.n:
            raise DimensionError(
                "edge families need one context value per vertex "
                f"(context_dim={self.context_dim}, n={self.graph.n})")
        feat = self.feature_dim
        if self.decoder.in_dim != feat + self.context_dim:
            raise DimensionError(
                f"decoder input width {self.decoder.in_dim} != "
                f"{feat} features + {self.context_dim} context")
        if self.decoder.out_dim != self.target_dim:
            raise DimensionError(
                f"decoder output width {self.decoder.out_dim} != "
                f"target dim {self.target_dim}")
        seg = self.params.layout
        if seg.slice_of(ENCODER_SEGMENT).stop - seg.slice_of(ENCODER_SEGMENT).start \
                != self.encoder.param_count():
            raise DimensionError("encoder segment length mismatch")
        if seg.slice_of(DECODER_SEGMENT).stop - seg.slice_of(DECODER_SEGMENT).start \
                != self.decoder.param_count():
            raise DimensionError("decoder segment length mismatch")

    @property
    def x_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def target_dim(self) -> int:
        return self.encoder.in_dim - self.context_dim

    @property
    def feature_dim(self) -> int:
        if self.family.kind == CATEGORICAL:
            return self.family.num_categories
        return 2 * self.graph.n

    def with_params(self, params: ParamVector | np.ndarray) -> "VaeModel":
        if isinstance(params, np.ndarray):
            params = self.params.with_values(params)
        return VaeModel(self.encoder, self.decoder, self.family, self.graph,
                        self.context_dim, params)


@dataclass
class ElboEstimate:
    """Negative-ELBO pieces; total is the loss being minimized."""

    reconstruction: float
    kl: float
    total: float
    samples_used: int

    def __post_init__(self):
        if not (np.isfinite(self.reconstruction) and np.isfinite(self.kl)):
            raise NonFiniteFitnessError(
                f"non-finite ELBO pieces: recon={self.reconstruction}, "
                f"kl={self.kl}")


def _elbo(reconstruction: float, kl: float, samples: int) -> ElboEstimate:
    return ElboEstimate(reconstruction, kl, -reconstruction + kl, samples)


def build_model(family: StructureFamily, graph: Graph | None, x_dim: int,
                context_dim: int, hidden: tuple[int, ...],
                rng: RngStream, activation: str = "relu",
                dec_hidden: tuple[int, ...] | None = None,
                init_scale: float = 1.0) -> VaeModel:
    """Construct a model with freshly initialized parameters."""
    k = indicator_length(family, graph)
    feat = k if family.kind == CATEGORICAL else 2 * graph.n
    enc = MlpSpec((x_dim, *hidden, k), activation)
    dec_widths = (feat + context_dim,
                  *(hidden if dec_hidden is None else dec_hidden),
                  x_dim - context_dim)
    dec = MlpSpec(dec_widths, activation)
    params = concat_segments([
        (ENCODER_SEGMENT, init_mlp_params(enc, rng.child(0), init_scale)),
        (DECODER_SEGMENT, init_mlp_params(dec, rng.child(1), init_scale)),
    ])
    return VaeModel(enc, dec, family, graph, context_dim, params)


def encode_scores(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """Edge/category scores produced by the encoder for one input."""
    return mlp_forward(model.encoder, model.params.segment(ENCODER_SEGMENT), x)


def structure_features(model: VaeModel, x: np.ndarray,
                       z: np.ndarray) -> np.ndarray:
    """Decoder-side summary of a structure.

    Categorical families pass the one-hot indicator through.  Edge families
    emit, per vertex, the sum of neighbouring context values over selected
    edges and the selected degree.
    """
    if model.family.kind == CATEGORICAL:
        return np.asarray(z, dtype=np.float64)
    graph = model.graph
    ctx = np.asarray(x, dtype=np.float64)[:model.context_dim]
    neighbor_sum = np.zeros(graph.n)
    degree = np.zeros(graph.n)
    for i in np.flatnonzero(z):
        u, v = graph.edges[i]
        neighbor_sum[v] += ctx[u]
        degree[v] += 1.0
        if not graph.directed:
            neighbor_sum[u] += ctx[v]
            degree[u] += 1.0
    return np.concatenate([neighbor_sum, degree])


def decode_mean(model: VaeModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    feats = structure_features(model, x, z)
    ctx = np.asarray(x, dtype=np.float64)[:model.context_dim]
    return mlp_forward(model.decoder, model.params.segment(DECODER_SEGMENT),
                       np.concatenate([feats, ctx]))


def decoder_loglik(model: VaeModel, x: np.ndarray, z: np.ndarray) -> float:
    """Unit-variance Gaussian log-likelihood of the reconstruction target."""
    if not validate_structure(model.family, model.graph, z):
        raise InvalidStructureError(
            f"indicator is not a valid {model.family.kind} structure")
    return _loglik_unchecked(model, x, z)


def _loglik_unchecked(model: VaeModel, x: np.ndarray, z: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    target = x[model.context_dim:]
    resid = target - decode_mean(model, x, z)
    return float(-0.5 * resid @ resid - 0.5 * len(target) * LOG_2PI)


def decode_rows(model: VaeModel, xs: np.ndarray, zs: np.ndarray):
    """Batched decode of (input, structure) rows.

    Returns (decoder inputs, predictions, targets, log-likelihoods), each
    with one row (or entry) per input pair.
    """
    xs = np.asarray(xs, dtype=np.float64)
    feats = np.stack([structure_features(model, x, z)
                      for x, z in zip(xs, zs)])
    dec_in = np.concatenate([feats, xs[:, :model.context_dim]], axis=1)
    yhat = mlp_forward(model.decoder, model.params.segment(DECODER_SEGMENT),
                       dec_in)
    target = xs[:, model.context_dim:]
    resid = target - yhat
    logliks = -0.5 * np.sum(resid * resid, axis=1) \
        - 0.5 * target.shape[1] * LOG_2PI
    return dec_in, yhat, target, logliks


def kl_term(model: VaeModel, scores: np.ndarray,
            sampled: list[np.ndarray]) -> float:
    """Sampled KL approximation: mean(z' scores) + log |Z|."""
    count = count_structures(model.family, model.graph)
    scores = np.asarray(scores, dtype=np.float64)
    mean_score = float(np.mean([z @ scores for z in sampled]))
    return mean_score + math.log(count)


def elbo_sample(model: VaeModel, x: np.ndarray, rng: RngStream,
                num_samples: int = 1) -> ElboEstimate:
    """Monte-Carlo negative ELBO from perturb-and-MAP samples."""
    if num_samples < 1:
        raise DimensionError("need at least one sample")
    x = np.asarray(x, dtype=np.float64)
    scores = encode_scores(model, x)
    draws = perturb_and_map_many(model.family, model.graph, scores, rng,
                                 num_samples)
    xs = np.broadcast_to(x, (num_samples, x.shape[0]))
    _, _, _, logliks = decode_rows(model, xs, draws)
    recon = float(logliks.mean())
    kl = float(np.mean(draws @ scores)) \
        + math.log(count_structures(model.family, model.graph))
    return _elbo(recon, kl, num_samples)


@lru_cache(maxsize=32)
def _structure_matrix(family: StructureFamily, graph: Graph | None,
                      cap: int) -> np.ndarray:
    structures = enumerate_structures(family, graph, cap)
    return np.array(structures, dtype=np.float64)


def structure_log_posterior(model: VaeModel, scores: np.ndarray,
                            cap: int = DEFAULT_ENUMERATION_CAP):
    """(structure matrix, log-softmax weights) over the whole family."""
    zmat = _structure_matrix(model.family, model.graph, cap)
    s = zmat @ np.asarray(scores, dtype=np.float64)
    smax = np.max(s)
    logz = smax + math.log(np.sum(np.exp(s - smax)))
    return zmat, s - logz


def exact_elbo(model: VaeModel, x: np.ndarray,
               cap: int = DEFAULT_ENUMERATION_CAP) -> ElboEstimate:
    """Exact negative ELBO by enumerating the structure family.

    The posterior is the softmax of structure scores with exact
    normalization; the KL is against the uniform prior.
    """
    scores = encode_scores(model, x)
    zmat, logq = structure_log_posterior(model, scores, cap)
    q = np.exp(logq)
    logliks = np.array([_loglik_unchecked(model, x, z) for z in zmat])
    recon = float(q @ logliks)
    kl = float(q @ logq) + math.log(zmat.shape[0])
    return _elbo(recon, kl, zmat.shape[0])


def bounded_loss(loss: float, output_dim: int, bound: float | None) -> float:
    """Scale a loss by the output dimension and clip it from above.

    A bound of None (or +inf) disables clipping but keeps the scaling.
    """
    if output_dim < 1:
        raise DimensionError("output_dim must be >= 1")
    scaled = loss / output_dim
    if bound is None or bound == math.inf:
        return scaled
    if bound <= 0:
        raise DimensionError("bound must be positive")
    return min(scaled, bound)


# ---------------------------------------------------------------------------
# Checkpoints

_CHECKPOINT_FORMAT = "nesvae-model"
_CHECKPOINT_VERSION = 1


def save_model(model: VaeModel, path: str | os.PathLike) -> None:
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "encoder": {"widths": list(model.encoder.widths),
                    "activation": model.encoder.activation},
        "decoder": {"widths": list(model.decoder.widths),
                    "activation": model.decoder.activation},
        "family": {"kind": model.family.kind,
                   "num_categories": model.family.num_categories,
                   "subset_size": model.family.subset_size,
                   "single_root": model.family.single_root},
        "graph": None if model.graph is None else {
            "n": model.graph.n,
            "edges": [list(e) for e in model.graph.edges],
            "directed": model.graph.directed,
            "root": model.graph.root},
        "context_dim": model.context_dim,
        "layout": [[name, length]
                   for name, length in model.params.layout.segments],
        "values": model.params.values.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path: str | os.PathLike) -> VaeModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"cannot parse checkpoint: {exc}")
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointFormatError("not a model checkpoint")
    if doc.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {doc.get('version')}")
    enc = MlpSpec(tuple(doc["encoder"]["widths"]),
                  doc["encoder"]["activation"])
    dec = MlpSpec(tuple(doc["decoder"]["widths"]),
                  doc["decoder"]["activation"])
    fam = StructureFamily(doc["family"]["kind"],
                          num_categories=doc["family"]["num_categories"],
                          subset_size=doc["family"]["subset_size"],
                          single_root=doc["family"]["single_root"])
    graph = None
    if doc["graph"] is not None:
        graph = Graph(doc["graph"]["n"],
                      tuple(tuple(e) for e in doc["graph"]["edges"]),
                      directed=doc["graph"]["directed"],
                      root=doc["graph"]["root"])
    layout = SegmentLayout(tuple((name, length)
                                 for name, length in doc["layout"]))
    params = ParamVector(np.array(doc["values"], dtype=np.float64), layout)
    return VaeModel(enc, dec, fam, graph, doc["context_dim"], params)
