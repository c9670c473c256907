"""Evolution-strategies training: smoothed-gradient estimation and updates.

One generation perturbs the flat parameter vector with N Gaussian draws
(mirrored in +/- pairs by default), evaluates the fitness of every
perturbed model, optionally standardizes the fitness values across the
population, and descends along (1/N) sum_i (w_i / sigma) score_i.

All randomness is routed through per-(iteration, perturbation) streams and
the reduction order is fixed by perturbation index, so a training run is a
pure function of (seed, config, data) no matter how many worker threads
evaluate the population.
"""

from __future__ import annotations

import csv
import inspect
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteFitnessError
from .params import ParamVector
from .rng import RngStream, gaussian_sample
from .vae import VaeModel, bounded_loss, elbo_sample

TRACE_HEADER = ("iter", "mean_fitness", "grad_sq_norm", "wallclock_ms", "eta")


@dataclass(frozen=True)
class NesConfig:
    """Hyper-parameters of the evolution-strategies loop."""

    sigma: float
    population: int
    eta: float
    iterations: int
    mirrored: bool = True
    standardize: bool = True
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None
    gamma_samples: int = 1
    bound: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"sigma must be finite positive, got {self.sigma}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigError(f"eta must be finite positive, got {self.eta}")
        if self.population < 1:
            raise ConfigError("population must be >= 1")
        if self.mirrored and self.population % 2:
            raise ConfigError(
                f"mirrored sampling needs an even population, got "
                f"{self.population}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


@dataclass
class Generation:
    """One population's perturbations, fitnesses and gradient estimate."""

    perturbations: np.ndarray
    fitnesses: np.ndarray
    standardized: np.ndarray
    gradient_estimate: np.ndarray


@dataclass
class TraceRecord:
    iteration: int
    mean_fitness: float
    grad_sq_norm: float
    wallclock_ms: float
    eta: float


@dataclass
class TrainingTrace:
    """Per-iteration metrics of a training run.

    The wallclock_ms column is real measured time; every other column is a
    pure function of (seed, config, data).  Determinism comparisons use
    stable_rows(), which drops the wall clock.
    """

    records: list[TraceRecord] = field(default_factory=list)
    optimizer: str | None = None
    meta: dict = field(default_factory=dict)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def mean_grad_sq_norm(self, first: int | None = None) -> float:
        records = self.records if first is None else self.records[:first]
        return float(np.mean([r.grad_sq_norm for r in records]))

    def stable_rows(self) -> list[tuple]:
        return [(r.iteration, repr(r.mean_fitness), repr(r.grad_sq_norm),
                 repr(r.eta)) for r in self.records]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            for r in self.records:
                writer.writerow([r.iteration, repr(r.mean_fitness),
                                 repr(r.grad_sq_norm), repr(r.wallclock_ms),
                                 repr(r.eta)])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "TrainingTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_HEADER:
                raise ConfigError(f"unexpected trace header {header}")
            for row in reader:
                trace.append(TraceRecord(int(row[0]), float(row[1]),
                                         float(row[2]), float(row[3]),
                                         float(row[4])))
        return trace


def mirrored_pairs(rng: RngStream, d: int, population: int) -> np.ndarray:
    """(population, d) perturbations as adjacent (+w, -w) pairs.

    Base draw j comes from stream rng.child(j), identical to
    gaussian_sample(rng.child(j), d).
    """
    if population % 2:
        raise ConfigError(f"mirrored population must be even, got {population}")
    out = np.empty((population, d))
    for j in range(population // 2):
        w = gaussian_sample(rng.child(j), d)
        out[2 * j] = w
        out[2 * j + 1] = -w
    return out


def standardize_fitnesses(fitnesses: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance scores; all-equal fitnesses map to zeros.

    "Equal" is judged relative to the mean's magnitude: a spread at the
    rounding floor is indistinguishable from none and must not be inflated
    into unit-scale scores.
    """
    fitnesses = np.asarray(fitnesses, dtype=np.float64)
    mean = float(fitnesses.mean())
    std = float(fitnesses.std())
    if std <= 1e-12 * (1.0 + abs(mean)):
        return np.zeros_like(fitnesses)
    return (fitnesses - mean) / std


def _wants_index(objective) -> bool:
    try:
        sig = inspect.signature(objective)
    except (TypeError, ValueError):
        return False
    positional = [p for p in sig.parameters.values()
                  if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    return len(positional) >= 2


def nes_gradient_estimate(objective, mu: ParamVector, cfg: NesConfig,
                          rng: RngStream, threads: int = 1) -> Generation:
    """Estimate the smoothed-objective gradient at mu.

    `objective` maps a ParamVector (optionally plus the perturbation index,
    for callers that route per-perturbation random streams) to a finite
    float; it is called exactly cfg.population times.  Evaluations may run
    on a thread pool; the reduction order is fixed by perturbation index.
    """
    d = mu.dim
    n = cfg.population
    if cfg.mirrored:
        pert = mirrored_pairs(rng, d, n)
    else:
        pert = np.stack([gaussian_sample(rng.child(i), d) for i in range(n)])

    indexed = _wants_index(objective)

    def evaluate(i: int) -> float:
        candidate = mu.with_values(mu.values + cfg.sigma * pert[i])
        try:
            return float(objective(candidate, i) if indexed
                         else objective(candidate))
        except NonFiniteFitnessError as exc:
            if exc.index is None:
                exc.index = i
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitnesses = np.array(list(pool.map(evaluate, range(n))))
    else:
        fitnesses = np.array([evaluate(i) for i in range(n)])

    bad = np.flatnonzero(~np.isfinite(fitnesses))
    if bad.size:
        raise NonFiniteFitnessError(
            f"objective returned {fitnesses[bad[0]]} for perturbation "
            f"{bad[0]}", index=int(bad[0]))

    scores = standardize_fitnesses(fitnesses) if cfg.standardize else fitnesses
    grad = pert.T @ scores / (n * cfg.sigma)
    return Generation(pert, fitnesses, scores, grad)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_opt_state(cfg: NesConfig, d: int) -> AdamState | None:
    if cfg.optimizer == "adam":
        return AdamState(np.zeros(d), np.zeros(d))
    return None


def apply_gradient(mu: ParamVector, grad: np.ndarray, cfg: NesConfig,
                   opt_state: AdamState | None = None) -> ParamVector:
    """One descent step along grad.

    Plain SGD subtracts eta * gradient; Adam applies the usual
    bias-corrected moment update (opt_state is advanced in place).
    """
    if cfg.optimizer == "sgd":
        return mu.with_values(mu.values - cfg.eta * grad)
    state = opt_state
    state.step += 1
    state.m = cfg.adam_beta1 * state.m + (1 - cfg.adam_beta1) * grad
    state.v = cfg.adam_beta2 * state.v + (1 - cfg.adam_beta2) * grad * grad
    mhat = state.m / (1 - cfg.adam_beta1 ** state.step)
    vhat = state.v / (1 - cfg.adam_beta2 ** state.step)
    step = cfg.eta * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return mu.with_values(mu.values - step)


def nes_update(mu: ParamVector, gen: Generation, cfg: NesConfig,
               opt_state: AdamState | None = None) -> ParamVector:
    """Descend along the generation's gradient estimate."""
    return apply_gradient(mu, gen.gradient_estimate, cfg, opt_state)


def _batch_indices(gen_stream: RngStream, num: int,
                   batch_size: int | None) -> np.ndarray:
    if batch_size is None or batch_size >= num:
        return np.arange(num)
    return gen_stream.child(0).generator().choice(num, size=batch_size,
                                                  replace=False)


def vae_fitness(model: VaeModel, batch: np.ndarray, gamma_stream: RngStream,
                cfg: NesConfig) -> float:
    """Mini-batch mean negative ELBO, optionally scaled and clipped."""
    total = 0.0
    for b, x in enumerate(batch):
        est = elbo_sample(model, x, gamma_stream.child(b), cfg.gamma_samples)
        loss = est.total
        if cfg.bound is not None:
            loss = bounded_loss(loss, model.target_dim, cfg.bound)
        total += loss
    return total / len(batch)


def train_loop(model: VaeModel, inputs: np.ndarray, cfg: NesConfig,
               rng: RngStream, threads: int = 1
               ) -> tuple[VaeModel, TrainingTrace]:
    """Run cfg.iterations generations of evolution-strategies training.

    `inputs` holds one flattened sample per row.  Within an iteration every
    perturbation is scored on the same mini-batch; perturbation i of
    iteration t draws its structure samples from stream (t, 2, i, .).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ConfigError("inputs must be a non-empty (samples, dim) matrix")
    mu = model.params
    opt_state = init_opt_state(cfg, mu.dim)
    trace = TrainingTrace(optimizer=cfg.optimizer, meta={
        "sigma": cfg.sigma, "population": cfg.population, "eta": cfg.eta,
        "bound": cfg.bound, "dim": mu.dim})

    for t in range(cfg.iterations):
        started = time.perf_counter()
        gen_stream = rng.child(t)
        batch = inputs[_batch_indices(gen_stream, inputs.shape[0],
                                      cfg.batch_size)]

        def objective(pv: ParamVector, i: int) -> float:
            return vae_fitness(model.with_params(pv), batch,
                               gen_stream.child(2, i), cfg)

        try:
            generation = nes_gradient_estimate(objective, mu, cfg,
                                               gen_stream.child(1),
                                               threads=threads)
        except NonFiniteFitnessError as exc:
            exc.iteration = t
            raise NonFiniteFitnessError(
                f"iteration {t}: {exc}", index=exc.index, iteration=t)
        mu = nes_update(mu, generation, cfg, opt_state)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        trace.append(TraceRecord(
            iteration=t + 1,
            mean_fitness=float(generation.fitnesses.mean()),
            grad_sq_norm=float(generation.gradient_estimate
                               @ generation.gradient_estimate),
            wallclock_ms=elapsed_ms,
            eta=cfg.eta))

    return model.with_params(mu), trace
