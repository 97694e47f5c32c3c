"""Noisy EM: the EM loop with annealed data-noise injection.

Each iteration draws fresh noise for a copy of the data (noise never
accumulates), scales it by k**-tau, and runs the model's update with the
E-step posteriors from the clean data and the sufficient statistics from
the noisy copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .em import (
    NOISE_SCALE_ONLY,
    RunTrace,
    StopRule,
    UpdateOptions,
    converged,
    model_step,
    normalize_frozen,
    q_function,
)
from .errors import InputError
from .mixtures import (
    CensoredGammaParams,
    CmmParams,
    Dataset,
    GmmParams,
    ModelParams,
    _censored_mask,
    observed_log_likelihood,
)
from .noise import (
    GOLDEN_Z0,
    anneal,
    chaotic_fill,
    nem_boxes,
    sample_truncated_normal,
)

NEM = "nem-truncated-gaussian"
BLIND = "blind-gaussian"
DIEM = "diem"
CHAOTIC = "chaotic"
LOG_CONVEX = "log-convex-iid"
NONE = "none"

KINDS = (NEM, BLIND, DIEM, CHAOTIC, LOG_CONVEX, NONE)
SCREENED = (NEM, DIEM, CHAOTIC)
_KIND_ALIASES = {"nem": NEM, "blind": BLIND, "iid": LOG_CONVEX, "log-convex": LOG_CONVEX,
                 "cem": CHAOTIC, "chaos": CHAOTIC}
VARIANTS = ("standard", "ngem", "pna")


def canonical_kind(kind: str) -> str:
    k = str(kind).strip().lower()
    k = _KIND_ALIASES.get(k, k)
    if k not in KINDS:
        raise InputError(f"unknown noise kind {kind!r}; expected one of {', '.join(KINDS)}")
    return k


@dataclass(frozen=True)
class NoisePolicy:
    """How noise is generated and cooled.

    Gaussian kinds use ``sigma0`` as the initial standard deviation. The
    deterministic and chaotic kinds use ``s_n`` as their amplitude, a
    fraction of the admissible box.
    """

    kind: str = NONE
    sigma0: float = 0.0
    tau: float = 2.0
    s_n: float = 0.0
    pna_fraction: float = 0.5
    chaos_z0: float = GOLDEN_Z0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not (self.sigma0 >= 0 and math.isfinite(self.sigma0)):
            raise InputError("sigma0 must be finite and nonnegative")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if not 0.0 <= self.s_n <= 1.0:
            raise InputError("s_n must lie in [0, 1]")
        if not 0.0 < self.pna_fraction <= 1.0:
            raise InputError("pna_fraction must lie in (0, 1]")
        if not 0.0 < self.chaos_z0 < 1.0:
            raise InputError("chaos_z0 must lie in (0, 1)")

    @property
    def level(self) -> float:
        """The initial noise amplitude this policy actually uses."""
        if self.kind == NONE:
            return 0.0
        return self.s_n if self.kind in (DIEM, CHAOTIC) else self.sigma0

    def with_level(self, value: float) -> "NoisePolicy":
        if self.kind in (DIEM, CHAOTIC):
            return replace(self, s_n=float(value))
        return replace(self, sigma0=float(value))

    @property
    def label(self) -> str:
        return self.kind


@dataclass(frozen=True)
class NemConfig:
    policy: NoisePolicy = field(default_factory=NoisePolicy)
    variant: str = "standard"
    map_penalty: Optional[Callable] = None
    stop: StopRule = field(default_factory=StopRule)
    seed: Optional[int] = 0
    gem_step: float = 2.0
    frozen: frozenset = frozenset()
    noise_target: str = NOISE_SCALE_ONLY

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "frozen", normalize_frozen(self.frozen))


def pna_subselect(m: int, fraction: float, seed) -> np.ndarray:
    """ceil(fraction * m) distinct indices drawn uniformly, in sorted order."""
    if not 0.0 < fraction <= 1.0:
        raise InputError("fraction must lie in (0, 1]")
    count = int(math.ceil(fraction * m - 1e-12))
    if count >= m:
        return np.arange(m)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(m, size=count, replace=False))


def _relax(params: ModelParams, target: ModelParams, s: float) -> ModelParams:
    if isinstance(params, GmmParams):
        return GmmParams(params.weights + s * (target.weights - params.weights),
                         params.means + s * (target.means - params.means),
                         params.covariances + s * (target.covariances - params.covariances))
    if isinstance(params, CensoredGammaParams):
        return params.replace(theta=params.theta + s * (target.theta - params.theta))
    return target


def ngem_mstep(data: Dataset, params: ModelParams, step: float = 1.0, noisy_samples=None,
               frozen=frozenset(), gem_step: float = 2.0, noise_target: str = NOISE_SCALE_ONLY):
    """Any Q-increasing move from ``params``. Returns ``(params, stalled)``.

    The move goes a fraction ``step`` of the way to the model's M-step
    target (``step=1`` is the full M-step) and is halved until Q, computed
    on the noisy statistics, is no lower than at ``params``.
    """
    if step <= 0:
        raise InputError("step must be positive")
    frozen = normalize_frozen(frozen)
    opts = UpdateOptions(frozen, gem_step, noise_target, None)
    target, stalled = model_step(data, params, opts, noisy_samples)
    if isinstance(params, CmmParams):
        return target, stalled
    q = q_function(data, params, noisy_samples)
    q0 = q(params)
    s = float(step)
    for _ in range(40):
        try:
            cand = _relax(params, target, s) if s != 1.0 else target
        except InputError:
            s *= 0.5
            continue
        if q(cand) >= q0:
            return cand, False
        s *= 0.5
    return params, True


class _NoiseSource:
    """Produces the per-iteration noise array for one run."""

    def __init__(self, policy: NoisePolicy, rng):
        self.policy = policy
        self.rng = rng
        self.z = policy.chaos_z0

    def draw(self, samples, locations, scale, k):
        p = self.policy
        if p.kind in (BLIND, LOG_CONVEX):
            return scale * self.rng.standard_normal(samples.shape), None
        lo, hi = nem_boxes(samples, locations)
        if p.kind == NEM:
            return sample_truncated_normal(lo, hi, scale, self.rng), (lo, hi)
        if p.kind == DIEM:
            return scale * 0.5 * (lo + hi), (lo, hi)
        if p.kind == CHAOTIC:
            noise, self.z = chaotic_fill(self.z, lo + hi, p.s_n, k, p.tau)
            return noise, (lo, hi)
        raise InputError(f"noise kind {p.kind} draws nothing")


def _locations(params):
    if isinstance(params, GmmParams):
        return params.means
    if isinstance(params, CmmParams):
        return params.locations
    return None


def run_nem(init: ModelParams, data: Dataset, config: NemConfig = NemConfig(),
            observer: Optional[Callable] = None) -> RunTrace:
    """Noisy EM from ``init``.

    ``observer(k, noise, bounds)`` is called after every injection with the
    noise array and, for screened kinds, the (lower, upper) box bounds it
    was drawn against.
    """
    policy, stop = config.policy, config.stop
    if isinstance(init, CensoredGammaParams) and policy.kind in SCREENED:
        raise InputError("screened noise needs mixture component locations")
    rng = np.random.default_rng(config.seed)
    source = _NoiseSource(policy, rng)
    opts = UpdateOptions(config.frozen, config.gem_step, config.noise_target, config.map_penalty)
    level = policy.level
    y = data.samples
    cens = _censored_mask(init, data) if isinstance(init, CensoredGammaParams) else None

    trace = RunTrace()
    params = init
    ll = observed_log_likelihood(params, data)
    trace.record(params, ll, 0.0)
    for k in range(1, stop.max_iters + 1):
        scale = anneal(level, k, policy.tau)
        noisy = None
        if scale > 0:
            noise, bounds = source.draw(y, _locations(params), scale, k)
            if config.variant == "pna":
                keep = np.zeros(y.shape[0], dtype=bool)
                keep[pna_subselect(y.shape[0], policy.pna_fraction, rng)] = True
                noise[~keep] = 0.0
            if cens is not None:
                moved = y + noise
                outside = (moved <= 0) | (moved >= init.censor)
                trace.zeroed_noise += int(np.count_nonzero(outside & ~cens[:, None]))
                noise[outside | cens[:, None]] = 0.0
            if observer is not None:
                observer(k, noise, bounds)
            noisy = y + noise
        if config.variant == "ngem":
            new, stalled = ngem_mstep(data, params, 1.0, noisy, config.frozen,
                                      config.gem_step, config.noise_target)
        else:
            new, stalled = model_step(data, params, opts, noisy)
        trace.stalled_steps += stalled
        ll_new = observed_log_likelihood(new, data)
        trace.record(new, ll_new, scale)
        done = converged(stop, params, new, ll, ll_new, config.frozen)
        params, ll = new, ll_new
        if done:
            trace.converged_at = k
            break
    return trace

