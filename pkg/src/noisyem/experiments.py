"""Monte Carlo harness: noise-level sweeps, sample-size sweeps, sparsity and
occupation-probability tables, and clustering benchmarks.

Seeding: trial t always sees the dataset drawn from ``[master, 1, t]`` (plus
the sample size where it varies), so every noise level is compared on the
same data. The noise stream of (policy p, level s, trial t) comes from
``[master, 2, p, s, t]``. Results do not depend on worker count or order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .clustering import (
    StreamSpec,
    misclassification_rate,
    run_noisy_competitive,
    run_noisy_kmeans,
)
from .em import NOISE_SCALE_ONLY, StopRule, run_em
from .errors import InputError, NumericalError
from .mixtures import (
    GmmParams,
    ModelParams,
    relative_entropy,
    sample_dataset,
)
from .nem import BLIND, NEM, NONE, NemConfig, NoisePolicy, run_nem
from .noise import am_probability_table

DATA_STREAM = 1
NOISE_STREAM = 2
SWEEP_HEADER = ["policy", "sigma_n", "trials", "failures", "mean_iters", "ci_lo", "ci_hi"]


def data_seed(master: int, trial: int, *extra) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), DATA_STREAM, *map(int, extra), int(trial)])


def noise_seed(master: int, policy_idx: int, level_idx: int, trial: int, *extra) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), NOISE_STREAM, *map(int, extra),
                                   int(policy_idx), int(level_idx), int(trial)])


def _as_int_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(2, np.uint64)[0])


def bootstrap_ci(samples, level: float = 0.95, resamples: int = 2000, seed=0):
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise InputError("bootstrap needs at least one sample")
    if resamples < 1000:
        raise InputError("use at least 1000 resamples")
    if x.size == 1 or np.all(x == x[0]):
        return float(x[0]), float(x[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = stats.bootstrap((x,), np.mean, confidence_level=level, n_resamples=resamples,
                              method="percentile", vectorized=True,
                              random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


@dataclass
class SweepRow:
    policy: str
    sigma_n: float
    trials: int
    failures: int
    mean_iters: float
    ci_lo: float
    ci_hi: float
    values: list = field(default_factory=list, repr=False)
    m: Optional[int] = None

    def as_record(self) -> dict:
        rec = {k: getattr(self, k) for k in SWEEP_HEADER}
        if self.m is not None:
            rec = {"m": self.m, **rec}
        return rec


@dataclass
class SweepResult:
    rows: list

    def baseline(self, m: Optional[int] = None) -> SweepRow:
        for r in self.rows:
            if r.policy == NONE and r.m == m:
                return r
        raise KeyError("sweep has no noiseless baseline row")

    def for_policy(self, policy: str, m: Optional[int] = None):
        return [r for r in self.rows if r.policy == policy and r.m == m]

    def best(self, policy: str, m: Optional[int] = None) -> SweepRow:
        rows = [r for r in self.for_policy(policy, m) if not math.isnan(r.mean_iters)]
        return min(rows, key=lambda r: r.mean_iters)

    def row(self, policy: str, sigma: float, m: Optional[int] = None) -> SweepRow:
        for r in self.for_policy(policy, m):
            if math.isclose(r.sigma_n, sigma, rel_tol=1e-9, abs_tol=1e-12):
                return r
        raise KeyError(f"no row for {policy} at {sigma}")

    def reduction(self, row: SweepRow) -> float:
        """Relative drop of the mean versus the noiseless baseline (positive is faster)."""
        base = self.baseline(row.m).mean_iters
        return 1.0 - row.mean_iters / base

    def ci_separated(self, row: SweepRow) -> bool:
        """True when the row's interval lies entirely below the baseline interval."""
        return row.ci_hi < self.baseline(row.m).ci_lo

    def to_csv(self) -> str:
        buf = io.StringIO()
        with_m = any(r.m is not None for r in self.rows)
        header = (["m"] if with_m else []) + SWEEP_HEADER
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.rows:
            rec = r.as_record()
            w.writerow([_fmt(rec.get(k)) for k in header])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([r.as_record() for r in self.rows], indent=2, sort_keys=True)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def summarize(policy: str, sigma: float, values, seed, m=None) -> SweepRow:
    vals = [v for v in values if v is not None]
    fails = len(values) - len(vals)
    if vals:
        mean = float(np.mean(vals))
        lo, hi = bootstrap_ci(vals, seed=seed)
    else:
        mean = lo = hi = float("nan")
    return SweepRow(policy, float(sigma), len(values), fails, mean, lo, hi, vals, m)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def _sweep(trial_fn: Callable, policies: Sequence[NoisePolicy], grid, trials: int, master: int,
           jobs: int = 1, m=None) -> list:
    """Baseline row plus one row per (policy, nonzero level)."""
    cells = [(-1, 0, 0.0)]
    for p_idx, pol in enumerate(policies):
        for s_idx, level in enumerate(grid):
            if level > 0:
                cells.append((p_idx, s_idx, float(level)))
    tasks = [(c, t) for c in cells for t in range(trials)]
    out = _map(partial(_run_cell_trial, trial_fn, tuple(policies)), tasks, jobs)
    rows = []
    for i, (p_idx, s_idx, level) in enumerate(cells):
        vals = out[i * trials:(i + 1) * trials]
        label = NONE if p_idx < 0 else policies[p_idx].label
        rows.append(summarize(label, level, vals, seed=[master, 3, p_idx + 1, s_idx], m=m))
    return rows


def _run_cell_trial(trial_fn, policies, task):
    (p_idx, s_idx, level), trial = task
    policy = NoisePolicy() if p_idx < 0 else policies[p_idx].with_level(level)
    return trial_fn(policy, p_idx + 1, s_idx, trial)


# -- EM / NEM noise sweeps ---------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """Everything one noise-benefit sweep needs."""

    truth: ModelParams
    init: ModelParams
    m: int
    grid: tuple
    trials: int = 100
    policies: tuple = (NoisePolicy(NEM),)
    frozen: frozenset = frozenset()
    stop: StopRule = StopRule(2, 1000)
    master_seed: int = 0
    gem_step: float = 2.0
    noise_target: str = NOISE_SCALE_ONLY
    variant: str = "standard"
    tau: float = 2.0

    def __post_init__(self):
        if self.trials < 1:
            raise InputError("trials must be at least 1")
        if len(self.grid) == 0:
            raise InputError("noise grid is empty")
        if self.m < 1:
            raise InputError("sample size must be at least 1")


def em_trial(spec: SweepSpec, policy: NoisePolicy, p_idx: int, s_idx: int, trial: int,
             m: Optional[int] = None, m_idx: int = 0):
    """Convergence iterations of one NEM run, or None on failure."""
    m = spec.m if m is None else m
    extra = () if m == spec.m else (m_idx,)
    data = sample_dataset(spec.truth, m, data_seed(spec.master_seed, trial, *extra))
    cfg = NemConfig(replace(policy, tau=spec.tau), spec.variant, None, spec.stop,
                    _as_int_seed(noise_seed(spec.master_seed, p_idx, s_idx, trial, *extra)),
                    spec.gem_step, spec.frozen, spec.noise_target)
    try:
        trace = run_nem(spec.init, data, cfg)
    except NumericalError:
        return None
    return trace.converged_at


def _em_trial_adapter(spec, policy, p_idx, s_idx, trial):
    return em_trial(spec, policy, p_idx, s_idx, trial)


def run_noise_sweep(spec: SweepSpec, jobs: int = 1) -> SweepResult:
    """Mean convergence iterations per (policy, noise level) with bootstrap CIs."""
    fn = partial(_em_trial_adapter, spec)
    return SweepResult(_sweep(fn, spec.policies, spec.grid, spec.trials, spec.master_seed, jobs))


def _m_trial_adapter(spec, m, m_idx, policy, p_idx, s_idx, trial):
    return em_trial(spec, policy, p_idx, s_idx, trial, m, m_idx)


def run_sample_size_sweep(spec: SweepSpec, sample_sizes, sigma: Optional[float] = None,
                          jobs: int = 1) -> SweepResult:
    """The sweep repeated for every sample size, at one noise level per policy."""
    grid = tuple(spec.grid) if sigma is None else (float(sigma),)
    rows = []
    for m_idx, m in enumerate(sample_sizes):
        fn = partial(_m_trial_adapter, spec, int(m), m_idx)
        rows += _sweep(fn, spec.policies, grid, spec.trials, spec.master_seed, jobs, m=int(m))
    return SweepResult(rows)


# -- sparsity ------------------------------------------------------------------


@dataclass
class SparsityTable:
    sample_sizes: list
    sigmas: list
    mean_divergence: np.ndarray  # rows: sample size, columns: noise level
    std_error: np.ndarray

    def dip(self, m_idx: int) -> float:
        """min over noise levels minus the noiseless value (<= 0 means noise helped)."""
        row = self.mean_divergence[m_idx]
        return float(row.min() - row[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "sigma_n", "mean_divergence", "std_error"])
        for i, m in enumerate(self.sample_sizes):
            for j, s in enumerate(self.sigmas):
                w.writerow([m, repr(float(s)), repr(float(self.mean_divergence[i, j])),
                            repr(float(self.std_error[i, j]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"m": list(self.sample_sizes), "sigma_n": list(map(float, self.sigmas)),
                           "mean_divergence": self.mean_divergence.tolist(),
                           "std_error": self.std_error.tolist()}, indent=2)


def _sparsity_trial(truth, init, frozen, stop, kind, master, task):
    m_idx, m, s_idx, sigma, trial = task
    data = sample_dataset(truth, m, data_seed(master, trial, m_idx))
    cfg = NemConfig(NoisePolicy(kind, sigma), stop=stop, frozen=frozen,
                    seed=_as_int_seed(noise_seed(master, 1, s_idx, trial, m_idx)))
    try:
        est = run_nem(init, data, cfg).final
    except NumericalError:
        return math.nan
    return relative_entropy(truth, est)


def run_sparsity_experiment(truth: GmmParams, init: GmmParams, sample_sizes, sigmas, trials: int,
                            seed: int = 0, frozen=frozenset(), stop: StopRule = StopRule(),
                            kind: str = BLIND, jobs: int = 1) -> SparsityTable:
    """Average D(truth || estimate) after noisy EM, per sample size and noise level."""
    tasks = [(i, int(m), j, float(s), t) for i, m in enumerate(sample_sizes)
             for j, s in enumerate(sigmas) for t in range(trials)]
    vals = np.array(_map(partial(_sparsity_trial, truth, init, frozen, stop, kind, seed), tasks, jobs))
    vals = vals.reshape(len(sample_sizes), len(sigmas), trials)
    mean = np.nanmean(vals, axis=2)
    se = np.nanstd(vals, axis=2, ddof=1) / np.sqrt(np.sum(np.isfinite(vals), axis=2))
    return SparsityTable(list(map(int, sample_sizes)), list(map(float, sigmas)), mean, se)


# -- occupation probability ------------------------------------------------------


@dataclass
class ProbabilityTable:
    sample_sizes: list
    sigmas: list
    prob: np.ndarray
    mc_samples: int

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.prob * (1 - self.prob) / self.mc_samples)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "sigma_n", "probability", "std_error"])
        se = self.std_error
        for i, m in enumerate(self.sample_sizes):
            for j, s in enumerate(self.sigmas):
                w.writerow([m, repr(float(s)), repr(float(self.prob[i, j])), repr(float(se[i, j]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"m": self.sample_sizes, "sigma_n": self.sigmas,
                           "probability": self.prob.tolist(), "mc_samples": self.mc_samples}, indent=2)


def run_am_probability(model: GmmParams, sample_sizes=range(1, 61),
                       sigmas=tuple(np.round(np.arange(1, 11) / 10, 10)),
                       mc_samples: int = 100_000, seed: int = 0) -> ProbabilityTable:
    ms = [int(m) for m in sample_sizes]
    sig = [float(s) for s in sigmas]
    prob = am_probability_table(model, ms, sig, mc_samples, seed)
    return ProbabilityTable(ms, sig, prob, mc_samples)


# -- clustering benchmarks ---------------------------------------------------------


@dataclass
class CnbtRow:
    sigma_n: float
    trials: int
    mean_rate: float
    ci_lo: float
    ci_hi: float
    values: list = field(default_factory=list, repr=False)


@dataclass
class CnbtResult:
    rows: list

    @property
    def baseline(self) -> CnbtRow:
        return self.rows[0]

    def best(self) -> CnbtRow:
        return min(self.rows[1:], key=lambda r: r.mean_rate)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma_n", "trials", "mean_rate", "ci_lo", "ci_hi"])
        for r in self.rows:
            w.writerow([repr(r.sigma_n), r.trials, repr(r.mean_rate), repr(r.ci_lo), repr(r.ci_hi)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([{k: v for k, v in asdict(r).items() if k != "values"} for r in self.rows],
                          indent=2)


def _cnbt_trial(truth, init, m, sigmas, kind, stop, ref_stop, frozen, noise_target, master, trial):
    data = sample_dataset(truth, m, data_seed(master, trial))
    try:
        reference = run_em(init, data, ref_stop, frozen, noise_target=noise_target).final
        base = run_em(init, data, stop, frozen, noise_target=noise_target)
    except NumericalError:
        return [math.nan] * (len(sigmas) + 1)
    quarter = max(1, math.ceil((base.converged_at or stop.max_iters) / 4))
    fixed = StopRule(15, quarter)
    out = []
    for s_idx, sigma in enumerate([0.0] + list(sigmas)):
        cfg = NemConfig(NoisePolicy(kind, sigma), stop=fixed, frozen=frozen,
                        noise_target=noise_target,
                        seed=_as_int_seed(noise_seed(master, 1, s_idx, trial)))
        try:
            est = run_nem(init, data, cfg).final
        except NumericalError:
            out.append(math.nan)
            continue
        out.append(misclassification_rate(est, reference, data))
    return out


def run_cnbt_experiment(truth: GmmParams, init: GmmParams, m: int, sigmas, trials: int,
                        seed: int = 0, kind: str = NEM, stop: StopRule = StopRule(4, 1000),
                        frozen=frozenset(), noise_target: str = NOISE_SCALE_ONLY,
                        jobs: int = 1) -> CnbtResult:
    """Misclassification against the converged classifier after a quarter of the EM iterations.

    The quarter point is ceil(t_EM / 4) for the noiseless run on the same
    data. The first row is the noiseless rate.
    """
    ref_stop = StopRule(8, 5000)
    fn = partial(_cnbt_trial, truth, init, m, tuple(float(s) for s in sigmas if s > 0), kind,
                 stop, ref_stop, frozen, noise_target, seed)
    table = np.array(_map(fn, list(range(trials)), jobs))
    rows = []
    levels = [0.0] + [float(s) for s in sigmas if s > 0]
    for j, s in enumerate(levels):
        vals = table[:, j][np.isfinite(table[:, j])]
        lo, hi = bootstrap_ci(vals, seed=[seed, 4, j]) if vals.size else (math.nan, math.nan)
        rows.append(CnbtRow(s, int(vals.size), float(vals.mean()) if vals.size else math.nan,
                            lo, hi, vals.tolist()))
    return CnbtResult(rows)


def _kmeans_trial(centers, spread, m, stop, assign_on, master, policy, p_idx, s_idx, trial):
    truth = GmmParams.from_stds(np.full(len(centers), 1.0 / len(centers)), centers,
                                np.full(np.shape(centers), spread))
    data = sample_dataset(truth, m, data_seed(master, trial))
    trace = run_noisy_kmeans(data, len(centers), policy, stop,
                             _as_int_seed(noise_seed(master, p_idx, s_idx, trial)), assign_on)
    return trace.converged_at


def run_kmeans_sweep(centers, spread: float, m: int, grid, trials: int, seed: int = 0,
                     kinds=(BLIND,), stop: StopRule = StopRule(4, 1000), assign_on: str = "noisy",
                     tau: float = 2.0, jobs: int = 1) -> SweepResult:
    centers = np.asarray(centers, dtype=float)
    fn = partial(_kmeans_trial, centers, spread, m, stop, assign_on, seed)
    policies = [NoisePolicy(k, tau=tau) for k in kinds]
    return SweepResult(_sweep(fn, policies, grid, trials, seed, jobs))


def _competitive_trial(mode, stream, steps, schedule, master, policy, p_idx, s_idx, trial):
    # data stream keyed on the trial only; the noise stream differs per level
    seed = _as_int_seed(data_seed(master, trial))
    trace = run_noisy_competitive(mode, stream, policy, steps, seed=seed, schedule=schedule,
                                  noise_seed=_as_int_seed(noise_seed(master, p_idx, s_idx, trial)))
    return trace.converged_at


def run_competitive_sweep(mode: str, stream: StreamSpec, grid, trials: int, steps: int = 1500,
                          seed: int = 0, schedule: str = "variance", tau: float = 2.0,
                          jobs: int = 1) -> SweepResult:
    fn = partial(_competitive_trial, mode, stream, steps, schedule, seed)
    return SweepResult(_sweep(fn, [NoisePolicy(BLIND, tau=tau)], grid, trials, seed, jobs))
