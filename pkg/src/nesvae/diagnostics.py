"""Numerical checks of the smoothed-objective theory and scaling harness.

The smoothed objective of k at mu is the Gaussian expectation
g(mu) = E[k(mu + sigma w)].  For bounded k in [0, M] the curvature
quadratic form grad g' Hess g grad g is at most d M^3 / sigma^4, and plain
SGD traces obey
(1/T) sum ||grad g||^2 <= M / (eta T) + eta d M^3 / (2 sigma^4).
The checks here evaluate both inequalities on Monte-Carlo estimates with
explicit error bars, never on quantities the estimator cannot see.

Monte-Carlo finite differences share their Gaussian draws across evaluation
points (common random numbers); without that, second differences at step
sigma/100 would drown in noise.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import _reinforce_step, ControlVariate, unbiased_gradient
from .errors import ConfigError, NonFiniteFitnessError, TheoryMismatchError
from .nes import (
    NesConfig,
    TrainingTrace,
    apply_gradient,
    init_opt_state,
    nes_gradient_estimate,
    train_loop,
    vae_fitness,
)
from .params import ParamVector, SegmentLayout
from .rng import RngStream
from .vae import VaeModel, elbo_sample
from . import data as datamod

BENCH_HEADER = ("method", "input_size", "seed", "mean_iter_ms", "std_iter_ms")
BENCH_METHODS = ("nes", "reinforce_enum", "reinforce_sampled")


@dataclass
class SmoothedEstimate:
    """Monte-Carlo estimate of the smoothed objective at one point."""

    g_value: float
    std_error: float
    samples: int


@dataclass
class BoundReport:
    """Outcome of one inequality check.

    satisfied means quantity <= bound within the stated slack; status is
    "ok" or "inconclusive" (Monte-Carlo error too large to decide).
    """

    quantity: float
    bound: float
    satisfied: bool
    std_error: float
    status: str
    constants: dict = field(default_factory=dict)


def plain_params(values) -> ParamVector:
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return ParamVector(values, SegmentLayout((("params", len(values)),)))


def _values_of(mu) -> np.ndarray:
    if isinstance(mu, ParamVector):
        return mu.values
    return np.atleast_1d(np.asarray(mu, dtype=np.float64))


def _eval_batch(objective, points: np.ndarray) -> np.ndarray:
    vals = np.array([float(objective(p)) for p in points])
    if not np.isfinite(vals).all():
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NonFiniteFitnessError(
            f"objective returned {vals[bad]} at sample {bad}", index=bad)
    return vals


def estimate_smoothed(objective, mu, sigma: float, num_samples: int,
                      rng: RngStream) -> SmoothedEstimate:
    """Monte-Carlo mean and standard error of k(mu + sigma w)."""
    if num_samples < 2:
        raise ConfigError("need at least 2 samples for a standard error")
    values = _values_of(mu)
    w = rng.generator().standard_normal((num_samples, len(values)))
    vals = _eval_batch(objective, values + sigma * w)
    return SmoothedEstimate(float(vals.mean()),
                            float(vals.std(ddof=1) / math.sqrt(num_samples)),
                            num_samples)


def smoothing_distance(objective, mu, sigma: float, num_samples: int,
                       rng: RngStream) -> float:
    """|k(mu) - estimated g(mu)| for a deterministic objective."""
    est = estimate_smoothed(objective, mu, sigma, num_samples, rng)
    return abs(float(objective(_values_of(mu))) - est.g_value)


def vae_smoothing_distance(model: VaeModel, inputs: np.ndarray, sigma: float,
                           num_samples: int, rng: RngStream) -> float:
    """Mean over inputs of |loss(mu; x) - mean_i loss(mu + sigma w_i; x)|.

    The per-input structure-sampling stream is shared between the center
    evaluation and every perturbation, and the perturbation draws w_i come
    from streams independent of sigma, so distances at different sigma are
    directly comparable and the sigma -> 0 limit is exactly zero.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    base = model.params.values
    w = np.stack([rng.child(0, i).generator().standard_normal(len(base))
                  for i in range(num_samples)])
    total = 0.0
    for j, x in enumerate(inputs):
        gamma = rng.child(1, j)
        center = elbo_sample(model, x, gamma).total
        perturbed = [elbo_sample(model.with_params(base + sigma * w[i]), x,
                                 gamma).total
                     for i in range(num_samples)]
        total += abs(center - float(np.mean(perturbed)))
    return total / inputs.shape[0]


def curvature_bound_check(objective, mu1, mu2, sigma: float, M: float,
                          rng: RngStream, target_rel: float = 0.05,
                          grad_samples: int = 20000,
                          init_samples: int = 8192,
                          max_samples: int = 1 << 19) -> BoundReport:
    """Check grad g(mu1)' Hess g(mu2) grad g(mu1) <= d M^3 / sigma^4.

    The gradient is estimated with the antithetic score identity; the
    quadratic form is a directional second difference (step sigma/100)
    along the normalized gradient, with common random numbers.  Sample size
    doubles until the Monte-Carlo error is below target_rel * bound or the
    cap is reached (then status is "inconclusive").
    """
    v1 = _values_of(mu1)
    v2 = _values_of(mu2)
    d = len(v1)
    bound = d * M ** 3 / sigma ** 4

    w = rng.child(0).generator().standard_normal((grad_samples, d))
    diffs = (_eval_batch(objective, v1 + sigma * w)
             - _eval_batch(objective, v1 - sigma * w)) / 2.0
    grad_draws = w * diffs[:, None] / sigma
    grad = grad_draws.mean(axis=0)
    grad_se = grad_draws.std(axis=0, ddof=1) / math.sqrt(grad_samples)
    norm_sq = float(grad @ grad)
    norm_sq_se = 2.0 * float(np.sqrt(np.sum((grad * grad_se) ** 2)))

    constants = {"d": d, "M": M, "sigma": sigma, "h": sigma / 100.0,
                 "grad_norm_sq": norm_sq, "grad_norm_sq_se": norm_sq_se,
                 "curvature": 0.0, "samples": 0}
    if norm_sq == 0.0:
        return BoundReport(0.0, bound, True, 0.0, "ok", constants)

    u = grad / math.sqrt(norm_sq)
    h = sigma / 100.0
    draws = np.empty(0)
    samples = init_samples
    gen_stream = rng.child(1)
    chunk_id = 0
    while True:
        need = samples - len(draws)
        w2 = gen_stream.child(chunk_id).generator().standard_normal((need, d))
        chunk_id += 1
        plus = _eval_batch(objective, v2 + h * u + sigma * w2)
        mid = _eval_batch(objective, v2 + sigma * w2)
        minus = _eval_batch(objective, v2 - h * u + sigma * w2)
        new = (plus - 2.0 * mid + minus) / (h * h)
        draws = np.concatenate([draws, new])
        curv = float(draws.mean())
        curv_se = float(draws.std(ddof=1) / math.sqrt(len(draws)))
        if norm_sq * curv_se <= target_rel * bound or len(draws) >= max_samples:
            break
        samples *= 2

    quantity = curv * norm_sq
    std_error = abs(curv) * norm_sq_se + norm_sq * curv_se
    status = "ok" if norm_sq * curv_se <= target_rel * bound else "inconclusive"
    constants["curvature"] = curv
    constants["samples"] = len(draws)
    satisfied = quantity <= bound + 3.0 * std_error
    return BoundReport(quantity, bound, satisfied, std_error, status,
                       constants)


# ---------------------------------------------------------------------------
# Convergence-rate formulas and the trace check


def optimal_step_size(T: int, d: int, M: float, sigma: float) -> float:
    return math.sqrt(2.0 * sigma ** 4 / (T * d * M * M))


def average_grad_bound(eta: float, T: int, d: int, M: float,
                       sigma: float) -> float:
    return M / (eta * T) + eta * d * M ** 3 / (2.0 * sigma ** 4)


def gradient_norm_bound(T: int, d: int, M: float, sigma: float) -> float:
    return math.sqrt(2.0 * d * M ** 4 / (T * sigma ** 4))


def steps_to_reach(delta: float, d: int, M: float, sigma: float) -> float:
    return 2.0 * d * M ** 4 / (delta ** 2 * sigma ** 4)


def convergence_bound_check(trace: TrainingTrace, d: int, M: float,
                            sigma: float, eta: float,
                            T: int | None = None,
                            delta: float | None = None) -> BoundReport:
    """Check the SGD trace's average squared gradient norm against theory.

    Refuses traces produced by Adam: the bound covers plain updates only.
    The trace stores sampled-gradient norms, so the comparison carries the
    estimator's own noise; the standard error across iterations is
    reported alongside.
    """
    if trace.optimizer != "sgd":
        raise TheoryMismatchError(
            f"bound assumes plain SGD updates, trace used "
            f"{trace.optimizer!r}")
    if not trace.records:
        raise ConfigError("empty trace")
    T = len(trace.records) if T is None else T
    norms = np.array([r.grad_sq_norm for r in trace.records[:T]])
    avg = float(norms.mean())
    se = float(norms.std(ddof=1) / math.sqrt(len(norms))) if len(norms) > 1 \
        else 0.0
    bound = average_grad_bound(eta, T, d, M, sigma)
    constants = {
        "d": d, "M": M, "sigma": sigma, "eta": eta, "T": T,
        "eta_star": optimal_step_size(T, d, M, sigma),
        "bound_at_eta_star": gradient_norm_bound(T, d, M, sigma),
    }
    if delta is not None:
        constants["delta"] = delta
        constants["steps_to_reach_delta"] = steps_to_reach(delta, d, M, sigma)
    satisfied = avg <= bound + 3.0 * se
    return BoundReport(avg, bound, satisfied, se, "ok", constants)


# ---------------------------------------------------------------------------
# Trend studies


def sigma_proximity_trend(model: VaeModel, inputs: np.ndarray,
                          sigmas: list[float], cfg: NesConfig,
                          rng: RngStream, snapshots: int = 4,
                          distance_samples: int = 300) -> np.ndarray:
    """Distances |k - g| per training snapshot and sigma.

    Trains in `snapshots` equal segments and measures the smoothing
    distance at the initial model and after each segment; row i holds the
    distances at snapshot i for each sigma (same perturbation draws across
    sigmas).  Distances should not decrease as sigma grows.
    """
    if cfg.iterations % snapshots:
        raise ConfigError("iterations must divide evenly into snapshots")
    seg = cfg.iterations // snapshots
    rows = []
    current = model
    for snap in range(snapshots + 1):
        dist_rng = rng.child(1, snap)
        rows.append([vae_smoothing_distance(current, inputs, s,
                                            distance_samples, dist_rng)
                     for s in sigmas])
        if snap < snapshots:
            seg_cfg = replace(cfg, iterations=seg)
            current, _ = train_loop(current, inputs, seg_cfg,
                                    rng.child(0, snap))
    return np.array(rows)


def final_scaled_loss(model: VaeModel, inputs: np.ndarray, rng: RngStream,
                      eval_samples: int = 8) -> float:
    """Mean unclipped per-dimension loss, the common yardstick for runs."""
    totals = [elbo_sample(model, x, rng.child(j), eval_samples).total
              for j, x in enumerate(np.atleast_2d(inputs))]
    return float(np.mean(totals)) / model.target_dim


def bounded_loss_study(model: VaeModel, inputs: np.ndarray, cfg: NesConfig,
                       bounds: list[float | None],
                       rng: RngStream) -> dict[str, float]:
    """Train once per loss bound and report final unclipped scaled losses.

    All runs share the initial model and random streams; only the fitness
    clipping differs.  A bound of None trains on the raw loss.
    """
    results = {}
    for bound in bounds:
        run_cfg = replace(cfg, bound=bound)
        trained, _ = train_loop(model, inputs, run_cfg, rng.child(0))
        label = "unbounded" if bound is None else f"M={bound:g}"
        results[label] = final_scaled_loss(trained, inputs, rng.child(1))
    return results


# ---------------------------------------------------------------------------
# Wall-clock scaling harness


@dataclass
class BenchRow:
    method: str
    input_size: int
    seed: int
    mean_iter_ms: float
    std_iter_ms: float


def _bench_task(size: int, rng: RngStream):
    ds = datamod.gen_latent_tree_dataset(size, steps=10, samples=8,
                                         noise=0.05, rng=rng.child(0))
    from .vae import build_model
    model = build_model(ds.family, ds.graph, x_dim=size * 10,
                        context_dim=size, hidden=(16,), rng=rng.child(1))
    return model, ds.inputs()


def wallclock_bench(sizes: list[int], methods: list[str] = list(BENCH_METHODS),
                    repetitions: int = 3, rng: RngStream = RngStream(0),
                    population: int = 30, batch_size: int = 4,
                    enum_cap: int = 200_000,
                    time_budget_s: float = 60.0) -> list[BenchRow]:
    """Per-iteration wall-clock of each method at each input size.

    Measurements run one at a time.  Methods that cannot handle a size
    (enumeration above enum_cap) or that exhaust the per-cell time budget
    report the repetitions finished so far.
    """
    from .structures import count_structures
    rows = []
    for size in sizes:
        model, inputs = _bench_task(size, rng.child(size))
        cfg = NesConfig(sigma=0.1, population=population, eta=0.01,
                        iterations=1, batch_size=batch_size)
        for method in methods:
            if method not in BENCH_METHODS:
                raise ConfigError(f"unknown bench method {method!r}")
            if method == "reinforce_enum" and \
                    count_structures(model.family, model.graph) > enum_cap:
                continue
            times = []
            start_cell = time.perf_counter()
            for rep in range(repetitions):
                rep_rng = rng.child(size, rep)
                batch = inputs[:batch_size]
                t0 = time.perf_counter()
                _bench_iteration(method, model, batch, cfg, rep_rng)
                times.append((time.perf_counter() - t0) * 1000.0)
                if time.perf_counter() - start_cell > time_budget_s:
                    break
            arr = np.array(times)
            rows.append(BenchRow(method, size, rng.seed, float(arr.mean()),
                                 float(arr.std(ddof=1)) if len(arr) > 1
                                 else 0.0))
    return rows


def _bench_iteration(method: str, model: VaeModel, batch: np.ndarray,
                     cfg: NesConfig, rng: RngStream) -> None:
    mu = model.params
    opt = init_opt_state(cfg, mu.dim)
    if method == "nes":
        def objective(pv, i):
            return vae_fitness(model.with_params(pv), batch,
                               rng.child(2, i), cfg)
        gen = nes_gradient_estimate(objective, mu, cfg, rng.child(1))
        apply_gradient(mu, gen.gradient_estimate, cfg, opt)
    elif method == "reinforce_enum":
        grads = np.stack([unbiased_gradient(model, x) for x in batch])
        apply_gradient(mu, grads.mean(axis=0), cfg, opt)
    else:
        cv = ControlVariate("ema")
        phi, theta, _ = _reinforce_step(model, batch, cv, rng.child(1),
                                        kl_mode="sampled")
        grad = np.zeros(mu.dim)
        grad[mu.layout.slice_of("encoder")] = phi
        grad[mu.layout.slice_of("decoder")] = theta
        apply_gradient(mu, grad, cfg, opt)


def bench_to_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for r in rows:
            writer.writerow([r.method, r.input_size, r.seed,
                             repr(r.mean_iter_ms), repr(r.std_iter_ms)])
