"""Command-line harness for the noisy EM experiments.

Every subcommand reads a plain-text config (``--config``), a built-in
preset (``--preset``), or both, with ``--set key=value`` overrides on top.
Output goes to ``--out`` or stdout as CSV or JSON.

Exit status: 0 on success, 2 on a configuration or input error, 3 when a
run fails numerically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .clustering import StreamSpec, nearest, rotated_square, run_noisy_competitive, run_noisy_kmeans
from .config import ExperimentConfig
from .em import NOISE_SCALE_ONLY, run_em
from .errors import ConfigError, InputError, NumericalError
from .experiments import (
    SweepSpec,
    run_am_probability,
    run_cnbt_experiment,
    run_competitive_sweep,
    run_kmeans_sweep,
    run_noise_sweep,
    run_sample_size_sweep,
    run_sparsity_experiment,
)
from .mixtures import (
    Dataset,
    GmmParams,
    dataset_from_csv,
    dataset_to_csv,
    sample_dataset,
)
from .nem import NemConfig, run_nem

COMMANDS = ("gen", "em", "nem", "sweep", "samplesize", "sparsity", "amprob", "cnbt",
            "kmeans", "competitive")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisyem", description="Noisy EM experiment harness.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--preset", help=f"built-in protocol: {', '.join(sorted(cfgmod.PRESETS))}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one run option (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--single", action="store_true",
                   help="kmeans/competitive: one run instead of a sweep")
    return p


def load_config(args) -> ExperimentConfig:
    """Preset, then config file, then ``--set`` overrides; later layers win."""
    if not (args.preset or args.config):
        raise ConfigError("give --config or --preset")
    raw = cfgmod.preset(args.preset).raw if args.preset else {}
    if args.config:
        raw = cfgmod.merge(raw, cfgmod.load(args.config).raw)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        raw.setdefault(cfgmod.RUN, {})[key.strip().lower()] = value.strip()
    return ExperimentConfig(raw)


def master_seed(args, cfg: ExperimentConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.integer("seed", 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return seed


def sweep_spec(cfg: ExperimentConfig, seed: int = 0) -> SweepSpec:
    """The noise-sweep protocol a config describes."""
    try:
        return SweepSpec(
            truth=cfg.model(), init=cfg.init(), m=cfg.integer("samples", 200),
            grid=tuple(cfg.vector("grid")), trials=cfg.integer("trials", 100),
            policies=tuple(cfg.policies()), frozen=cfg.frozen(), stop=cfg.stop(),
            master_seed=seed, gem_step=cfg.number("gem_step", 2.0),
            noise_target=cfg.get("noise_target", NOISE_SCALE_ONLY),
            variant=cfg.get("variant", "standard"), tau=cfg.number("tau", 2.0))
    except InputError as exc:
        raise ConfigError(str(exc)) from None


def kmeans_centers(cfg: ExperimentConfig) -> np.ndarray:
    return cfgmod.parse_matrix(cfg.require("centers"))


def competitive_stream(cfg: ExperimentConfig) -> StreamSpec:
    centers = (cfgmod.parse_matrix(cfg.get("centers")) if cfg.get("centers")
               else rotated_square(cfg.number("side", 24.0)))
    return StreamSpec(centers, cfg.number("spread", 2.0))


def _dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    path = cfg.get("data")
    if path:
        try:
            return dataset_from_csv(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read data {path}: {exc}") from None
    return sample_dataset(cfg.model(), cfg.integer("samples", 200), seed)


def _run_noise_seed(seed: int) -> int:
    # independent of the data stream, which uses the master seed directly
    return int(np.random.SeedSequence([seed, 2]).generate_state(2, np.uint64)[0])


def _nem_config(cfg: ExperimentConfig, seed: int) -> NemConfig:
    return NemConfig(cfg.policy(), cfg.get("variant", "standard"), None, cfg.stop(), seed,
                     cfg.number("gem_step", 2.0), cfg.frozen(),
                     cfg.get("noise_target", NOISE_SCALE_ONLY))


def _trace_out(trace, fmt):
    return trace.to_csv() if fmt == "csv" else json.dumps(trace.to_dict())


def _table_out(result, fmt):
    return result.to_csv() if fmt == "csv" else result.to_json()


def run_command(args, cfg: ExperimentConfig) -> str:
    seed = master_seed(args, cfg)
    cmd, fmt, jobs = args.command, args.format, max(1, args.jobs)
    if cmd == "gen":
        data = sample_dataset(cfg.model(), cfg.integer("samples", 200), seed)
        if fmt == "csv":
            return dataset_to_csv(data)
        return json.dumps({
            "samples": data.samples.tolist(),
            "labels": None if data.labels is None else data.labels.tolist(),
            "censored": None if data.censored is None else data.censored.tolist(),
        })
    if cmd == "em":
        trace = run_em(cfg.init(), _dataset(cfg, seed), cfg.stop(), cfg.frozen(),
                       gem_step=cfg.number("gem_step", 2.0),
                       noise_target=cfg.get("noise_target", NOISE_SCALE_ONLY))
        return _trace_out(trace, fmt)
    if cmd == "nem":
        trace = run_nem(cfg.init(), _dataset(cfg, seed), _nem_config(cfg, _run_noise_seed(seed)))
        return _trace_out(trace, fmt)
    if cmd == "sweep":
        return _table_out(run_noise_sweep(sweep_spec(cfg, seed), jobs), fmt)
    if cmd == "samplesize":
        sigma = cfg.number("sigma") if cfg.get("sigma") is not None else None
        return _table_out(run_sample_size_sweep(sweep_spec(cfg, seed), cfg.ints("sample_sizes"),
                                                sigma, jobs), fmt)
    if cmd == "sparsity":
        truth = cfg.model()
        if not isinstance(truth, GmmParams):
            raise ConfigError("the sparsity experiment needs a Gaussian mixture")
        table = run_sparsity_experiment(truth, cfg.init(), cfg.ints("sample_sizes"),
                                        cfg.vector("grid"), cfg.integer("trials", 50), seed,
                                        cfg.frozen(), cfg.stop(), cfg.policy().kind, jobs)
        return _table_out(table, fmt)
    if cmd == "amprob":
        table = run_am_probability(cfg.model(), cfg.ints("sample_sizes"), cfg.vector("grid"),
                                   cfg.integer("mc_samples", 100_000), seed)
        return _table_out(table, fmt)
    if cmd == "cnbt":
        result = run_cnbt_experiment(cfg.model(), cfg.init(), cfg.integer("samples", 300),
                                     cfg.vector("grid"), cfg.integer("trials", 100), seed,
                                     cfg.policy().kind, cfg.stop(), cfg.frozen(),
                                     cfg.get("noise_target", NOISE_SCALE_ONLY), jobs)
        return _table_out(result, fmt)
    if cmd == "kmeans":
        return _kmeans(args, cfg, seed, jobs)
    return _competitive(args, cfg, seed, jobs)


def _kmeans(args, cfg, seed, jobs):
    assign_on = cfg.get("assign_on", "noisy")
    if not args.single:
        kinds = tuple(p.kind for p in cfg.policies())
        result = run_kmeans_sweep(kmeans_centers(cfg), cfg.number("spread", 1.0),
                                  cfg.integer("samples", 2500), cfg.vector("grid"),
                                  cfg.integer("trials", 100), seed, kinds, cfg.stop(), assign_on,
                                  cfg.number("tau", 2.0), jobs)
        return _table_out(result, args.format)
    if cfg.get("data"):
        data = _dataset(cfg, seed)
        k = cfg.integer("k")
    else:
        centers = kmeans_centers(cfg)
        k = cfg.integer("k", centers.shape[0])
        truth = GmmParams.from_stds(np.full(len(centers), 1.0 / len(centers)), centers,
                                    np.full(centers.shape, cfg.number("spread", 1.0)))
        data = sample_dataset(truth, cfg.integer("samples", 2500), seed)
    trace = run_noisy_kmeans(data, k, cfg.policy(), cfg.stop(), _run_noise_seed(seed), assign_on)
    assign = nearest(data.samples, trace.final)
    if args.format == "csv":
        lines = ["sample_index,cluster"] + [f"{i},{int(c)}" for i, c in enumerate(assign)]
        return "\n".join(lines) + "\n"
    return json.dumps({"converged_at": trace.converged_at,
                       "centroids": np.asarray(trace.final).tolist(),
                       "assignments": assign.tolist()})


def _competitive(args, cfg, seed, jobs):
    mode = cfg.get("mode", "ucl")
    stream = competitive_stream(cfg)
    steps = cfg.integer("steps", 1500)
    schedule = cfg.get("schedule", "variance")
    if not args.single:
        result = run_competitive_sweep(mode, stream, cfg.vector("grid"), cfg.integer("trials", 100),
                                       steps, seed, schedule, cfg.number("tau", 2.0), jobs)
        return _table_out(result, args.format)
    trace = run_noisy_competitive(mode, stream, cfg.policy(), steps, seed, schedule=schedule)
    return _trace_out(trace, args.format)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        text = run_command(args, cfg)
    except (ConfigError, InputError) as exc:
        print(f"noisyem: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"noisyem: numerical failure: {exc}", file=sys.stderr)
        return 3
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
