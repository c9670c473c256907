"""Command-line surface: gen | train | diagnose | bench.

Runs are declarative: a flat JSON config file (flags override file values)
plus the dataset bytes fully determine every output.  Each run directory
receives the resolved config, the trace CSV, the model checkpoint and a
manifest of content hashes; re-running the same config reproduces the same
stable hashes (wall-clock readings are excluded from the stable trace
hash, everything else is bit-exact).

Exit codes: 0 success, 1 library error (single machine-parseable line on
stderr), 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, data, diagnostics, nes, structures, vae
from .errors import ConfigError, NesVaeError
from .rng import RngStream

OUTPUT_ROOT_ENV = "NESVAE_OUTPUT_ROOT"

# sigma/population defaults follow the task family when not configured
FAMILY_DEFAULTS = {
    structures.SPANNING_TREE: (0.01, 600),
    structures.EDGE_SUBSET: (0.01, 600),
    structures.ARBORESCENCE: (0.1, 400),
    structures.PROJECTIVE_TREE: (0.1, 400),
    structures.CATEGORICAL: (0.1, 300),
}


@dataclass
class RunConfig:
    """Flat, JSON-serializable description of a training run."""

    method: str = "nes"
    dataset: str | None = None
    outdir: str | None = None
    seed: int = 0
    hidden: int = 64
    activation: str = "relu"
    init_scale: float = 1.0
    sigma: float | None = None
    population: int | None = None
    eta: float = 0.05
    iterations: int = 100
    mirrored: bool = True
    standardize: bool = True
    optimizer: str = "sgd"
    batch_size: int | None = 8
    gamma_samples: int = 1
    bound: float | None = None
    ema_decay: float = 0.9
    multisample_r: int = 2
    kl_mode: str = "exact"
    threads: int = 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        unknown = set(doc) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items()
                   if k in fields and v is not None})
    return RunConfig(**values)


def resolve_outdir(outdir: str | None, default_name: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    path = Path(outdir) if outdir else root / default_name
    if not path.is_absolute() and outdir is not None:
        path = root / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stable_trace_hash(trace: nes.TrainingTrace) -> str:
    blob = repr(trace.stable_rows()).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(outdir: Path, trace: nes.TrainingTrace | None) -> None:
    manifest: dict = {"files": {}}
    for name in ("config.json", "model.json", "trace.csv"):
        path = outdir / name
        if path.exists():
            manifest["files"][name] = _sha256(path)
    if trace is not None:
        manifest["trace_stable_sha256"] = _stable_trace_hash(trace)
        # wall-clock readings vary run to run; the stable hash is the
        # reproducibility contract for the trace
        manifest["files"].pop("trace.csv", None)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _build_model_for(ds: data.TrajectoryDataset, cfg: RunConfig) -> vae.VaeModel:
    n_signals, steps = ds.signal_shape
    context = 0 if ds.family.kind == structures.CATEGORICAL else n_signals
    return vae.build_model(ds.family, ds.graph, x_dim=n_signals * steps,
                           context_dim=context, hidden=(cfg.hidden,),
                           rng=RngStream(cfg.seed, (0,)),
                           activation=cfg.activation,
                           init_scale=cfg.init_scale)


def _nes_config(cfg: RunConfig, family_kind: str) -> nes.NesConfig:
    sigma, population = FAMILY_DEFAULTS[family_kind]
    return nes.NesConfig(
        sigma=cfg.sigma if cfg.sigma is not None else sigma,
        population=cfg.population if cfg.population is not None else population,
        eta=cfg.eta, iterations=cfg.iterations, mirrored=cfg.mirrored,
        standardize=cfg.standardize, optimizer=cfg.optimizer,
        batch_size=cfg.batch_size, gamma_samples=cfg.gamma_samples,
        bound=cfg.bound)


def recovery_f1(model: vae.VaeModel, ds: data.TrajectoryDataset) -> float:
    """Mean edge F1 of the MAP structure under learned scores vs truth."""
    scores = [vae.encode_scores(model, x) for x in ds.inputs()]
    preds = [structures.map_solve(model.family, model.graph, s)
             for s in scores]
    return float(np.mean([data.edge_f1(p, t)
                          for p, t in zip(preds, ds.truths())]))


def cmd_gen(args) -> int:
    outdir = resolve_outdir(args.outdir, "dataset")
    rng = RngStream(args.seed)
    if args.task == "tree":
        ds = data.gen_latent_tree_dataset(args.n, args.steps, args.samples,
                                          args.noise, rng)
    elif args.task == "clusters":
        ds = data.gen_cluster_dataset(args.k, args.dim, args.samples, rng,
                                      noise=args.noise)
    else:
        raise ConfigError(f"unknown task {args.task!r}")
    path = outdir / args.name
    data.save_dataset(ds, path)
    resolved = {"task": args.task, "seed": args.seed, "samples": args.samples,
                "noise": args.noise, "path": str(path)}
    print(json.dumps(resolved, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in vars(args)}
    cfg = load_run_config(args.config, overrides)
    if cfg.dataset is None:
        raise ConfigError("train needs --dataset or a config with one")
    try:
        ds = data.load_dataset(cfg.dataset)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {cfg.dataset}: {exc}")
    outdir = resolve_outdir(cfg.outdir, "run")
    model = _build_model_for(ds, cfg)
    inputs = ds.inputs()
    rng = RngStream(cfg.seed, (1,))

    if cfg.method == "nes":
        nes_cfg = _nes_config(cfg, ds.family.kind)
        trained, trace = nes.train_loop(model, inputs, nes_cfg, rng,
                                        threads=cfg.threads)
    elif cfg.method in baselines.BASELINE_METHODS:
        bl_cfg = baselines.BaselineConfig(
            eta=cfg.eta, iterations=cfg.iterations, optimizer=cfg.optimizer,
            batch_size=cfg.batch_size, ema_decay=cfg.ema_decay,
            multisample_r=cfg.multisample_r, kl_mode=cfg.kl_mode)
        trained, trace = baselines.baseline_train_loop(model, inputs,
                                                       cfg.method, bl_cfg,
                                                       rng)
    else:
        raise ConfigError(f"unknown method {cfg.method!r}")

    final_loss = diagnostics.final_scaled_loss(trained, inputs,
                                               RngStream(cfg.seed, (2,)))
    f1 = recovery_f1(trained, ds)

    with open(outdir / "config.json", "w") as fh:
        fh.write(cfg.to_json())
    vae.save_model(trained, outdir / "model.json")
    trace.to_csv(outdir / "trace.csv")
    write_manifest(outdir, trace)
    print(cfg.to_json())
    print(f"final_scaled_loss={final_loss!r} edge_f1={f1!r} "
          f"outdir={outdir}")
    return 0


def _load_run_dir(run: str):
    run_path = Path(run)
    cfg = load_run_config(run_path / "config.json", {})
    model = vae.load_model(run_path / "model.json")
    trace = nes.TrainingTrace.from_csv(run_path / "trace.csv")
    trace.optimizer = cfg.optimizer
    return cfg, model, trace


def cmd_diagnose(args) -> int:
    outdir = resolve_outdir(args.outdir, "diagnose")
    if args.check == "convergence":
        if args.run is None:
            raise ConfigError("--check convergence needs --run")
        cfg, model, trace = _load_run_dir(args.run)
        if cfg.bound is None:
            raise ConfigError(
                "convergence check needs a run trained with a loss bound")
        report = diagnostics.convergence_bound_check(
            trace, d=model.params.dim, M=cfg.bound,
            sigma=cfg.sigma if cfg.sigma is not None else
            FAMILY_DEFAULTS[model.family.kind][0],
            eta=cfg.eta, delta=args.delta)
    elif args.check == "curvature":
        M = args.bound_m

        def step(v):
            return M * float(v[0] > 0.0)

        report = diagnostics.curvature_bound_check(
            step, diagnostics.plain_params([0.0]),
            diagnostics.plain_params([args.mu2]), sigma=args.sigma, M=M,
            rng=RngStream(args.seed))
    elif args.check == "proximity":
        cfg = load_run_config(args.config, {"dataset": args.dataset,
                                            "seed": args.seed})
        if cfg.dataset is None:
            raise ConfigError("--check proximity needs --dataset")
        ds = data.load_dataset(cfg.dataset)
        model = _build_model_for(ds, cfg)
        nes_cfg = _nes_config(cfg, ds.family.kind)
        sigmas = [float(s) for s in args.sigmas.split(",")]
        grid = diagnostics.sigma_proximity_trend(
            model, ds.inputs()[:args.points], sigmas, nes_cfg,
            RngStream(cfg.seed, (3,)), snapshots=args.snapshots)
        with open(outdir / "proximity.csv", "w") as fh:
            fh.write("snapshot," + ",".join(f"sigma={s:g}" for s in sigmas)
                     + "\n")
            for i, row in enumerate(grid):
                fh.write(",".join([str(i)] + [repr(v) for v in row]) + "\n")
        print(json.dumps({"check": "proximity", "sigmas": sigmas,
                          "snapshots": args.snapshots,
                          "out": str(outdir / "proximity.csv")}))
        return 0
    elif args.check == "bound-study":
        cfg = load_run_config(args.config, {"dataset": args.dataset,
                                            "seed": args.seed})
        if cfg.dataset is None:
            raise ConfigError("--check bound-study needs --dataset")
        ds = data.load_dataset(cfg.dataset)
        model = _build_model_for(ds, cfg)
        nes_cfg = _nes_config(cfg, ds.family.kind)
        bounds = [None if b in ("none", "inf") else float(b)
                  for b in args.bounds.split(",")]
        results = diagnostics.bounded_loss_study(model, ds.inputs(), nes_cfg,
                                                 bounds,
                                                 RngStream(cfg.seed, (4,)))
        with open(outdir / "bound_study.json", "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
        print(json.dumps({"check": "bound-study", "results": results}))
        return 0
    else:
        raise ConfigError(f"unknown check {args.check!r}")

    doc = {"check": args.check, "quantity": report.quantity,
           "bound": report.bound, "satisfied": report.satisfied,
           "std_error": report.std_error, "status": report.status,
           "constants": report.constants}
    with open(outdir / f"{args.check}.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    outdir = resolve_outdir(args.outdir, "bench")
    sizes = [int(s) for s in args.sizes.split(",")]
    methods = args.methods.split(",")
    rows = diagnostics.wallclock_bench(sizes, methods,
                                       repetitions=args.reps,
                                       rng=RngStream(args.seed))
    path = outdir / "bench.csv"
    diagnostics.bench_to_csv(rows, path)
    print(json.dumps({"sizes": sizes, "methods": methods,
                      "out": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nesvae",
        description="Train discrete structured VAEs with evolution "
                    "strategies and gradient baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--task", choices=("tree", "clusters"), default="tree")
    p.add_argument("--n", type=int, default=6, help="tree vertices")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--k", type=int, default=10, help="cluster count")
    p.add_argument("--dim", type=int, default=8, help="cluster input dim")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default=None)
    p.add_argument("--name", default="dataset.nvds")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", default=None, help="JSON run config")
    for name, typ in (("dataset", str), ("outdir", str), ("method", str),
                      ("seed", int), ("hidden", int), ("activation", str),
                      ("sigma", float), ("population", int), ("eta", float),
                      ("iterations", int), ("batch_size", int),
                      ("gamma_samples", int), ("bound", float),
                      ("optimizer", str), ("ema_decay", float),
                      ("multisample_r", int), ("kl_mode", str),
                      ("threads", int), ("init_scale", float)):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ,
                       default=None)
    for name in ("mirrored", "standardize"):
        p.add_argument(f"--{name}", dest=name, default=None,
                       action=argparse.BooleanOptionalAction)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", help="run a theory or trend check")
    p.add_argument("--check", required=True,
                   choices=("convergence", "curvature", "proximity",
                            "bound-study"))
    p.add_argument("--run", default=None, help="training run directory")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--outdir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--bound-m", dest="bound_m", type=float, default=1.0)
    p.add_argument("--mu2", type=float, default=0.3)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--sigmas", default="0.01,0.05,0.1")
    p.add_argument("--snapshots", type=int, default=4)
    p.add_argument("--points", type=int, default=4)
    p.add_argument("--bounds", default="1,9,none")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bench", help="wall-clock scaling measurements")
    p.add_argument("--sizes", default="4,5,6")
    p.add_argument("--methods",
                   default="nes,reinforce_enum,reinforce_sampled")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 2
    except NesVaeError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
