"""Noise-free EM and GEM updates plus the generic iteration loop.

Every update takes an optional ``noisy_samples`` array. When given, the
E-step posteriors still come from the clean data at the current estimate
and the noisy copy only feeds the sufficient statistics. With
``noisy_samples=None`` (or the clean array itself) the updates are plain
EM. The NEM loop in :mod:`noisyem.nem` reuses everything here.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import optimize, special

from .errors import DegenerateComponentError, DivergenceError, InputError
from .mixtures import (
    CensoredGammaParams,
    CmmParams,
    Dataset,
    GmmParams,
    ModelParams,
    _censored_mask,
    component_log_pdf,
    observed_log_likelihood,
    responsibility_matrix,
)

MIN_MASS = 1e-300
VARIANCE_FLOOR = 1e-8
THETA_LIMIT = 1e12
MAX_HALVINGS = 40

# accepted spellings for frozen parameter groups
_ALIASES = {
    "alpha": "weights", "weights": "weights", "w": "weights",
    "mu": "means", "means": "means", "m": "locations", "locations": "locations",
    "sigma": "scales", "covariances": "scales", "variances": "scales",
    "dispersions": "scales", "d": "scales", "scales": "scales",
}

# which parameters can carry data noise in their sufficient statistics
NOISE_SCALE_ONLY = "scale"
NOISE_ALL = "all"


def normalize_frozen(frozen: Optional[Iterable[str]]) -> frozenset:
    """Map user spellings of parameter groups to {weights, means, scales}."""
    out = set()
    for name in frozen or ():
        key = _ALIASES.get(str(name).strip().lower())
        if key is None:
            raise InputError(f"unknown parameter group {name!r}")
        out.add("means" if key == "locations" else key)
    return frozenset(out)


@dataclass(frozen=True)
class StopRule:
    """Stop when successive estimates differ by less than 10**-tol_exponent.

    ``criterion`` is ``"params"`` (Euclidean norm over the free parameters)
    or ``"loglik"`` (absolute change in observed log-likelihood).
    """

    tol_exponent: int = 4
    max_iters: int = 500
    criterion: str = "params"

    def __post_init__(self):
        if int(self.tol_exponent) != self.tol_exponent or self.tol_exponent < 1:
            raise InputError("tol_exponent must be a positive integer")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InputError("max_iters must be a positive integer")
        if self.criterion not in ("params", "loglik"):
            raise InputError(f"unknown stopping criterion {self.criterion!r}")

    @property
    def tol(self) -> float:
        return 10.0 ** (-self.tol_exponent)


@dataclass
class RunTrace:
    """Per-iteration record of a run. Index 0 holds the initial estimate."""

    iterates: list = field(default_factory=list)
    logliks: list = field(default_factory=list)
    noise_scales: list = field(default_factory=list)
    converged_at: Optional[int] = None
    stalled_steps: int = 0
    zeroed_noise: int = 0

    def record(self, params, loglik, noise_scale):
        self.iterates.append(params)
        self.logliks.append(float(loglik))
        self.noise_scales.append(float(noise_scale))

    def __len__(self):
        return len(self.iterates)

    @property
    def final(self):
        return self.iterates[-1]

    @property
    def converged(self) -> bool:
        return self.converged_at is not None

    def to_csv(self) -> str:
        rows = [full_vector(p) for p in self.iterates]
        width = len(rows[0]) if rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loglik", "noise_scale"] + [f"param_{i}" for i in range(width)])
        for t, (row, ll, ns) in enumerate(zip(rows, self.logliks, self.noise_scales)):
            w.writerow([t, repr(ll), repr(ns)] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "converged_at": self.converged_at,
            "stalled_steps": self.stalled_steps,
            "zeroed_noise": self.zeroed_noise,
            "logliks": self.logliks,
            "noise_scales": self.noise_scales,
            "iterates": [full_vector(p).tolist() for p in self.iterates],
        }


# -- parameter vectors -------------------------------------------------------


def full_vector(params: ModelParams) -> np.ndarray:
    """All parameters flattened (weights, locations, scales)."""
    if isinstance(params, GmmParams):
        return np.concatenate([params.weights, params.means.ravel(), params.covariances.ravel()])
    if isinstance(params, CmmParams):
        return np.concatenate([params.weights, params.locations.ravel(), params.dispersions.ravel()])
    if isinstance(params, CensoredGammaParams):
        return np.array([params.theta])
    return np.asarray(params, dtype=float).ravel()


def free_vector(params: ModelParams, frozen=frozenset()) -> np.ndarray:
    """The vector the convergence test looks at.

    Gaussian scales enter as standard deviations so that the tolerance is
    in the units of the data.
    """
    if isinstance(params, CensoredGammaParams):
        return np.array([params.theta])
    if isinstance(params, GmmParams):
        if params.is_full:
            raise InputError("EM updates need a diagonal covariance model")
        parts = {"weights": params.weights, "means": params.means, "scales": params.stds}
    elif isinstance(params, CmmParams):
        parts = {"weights": params.weights, "means": params.locations, "scales": params.dispersions}
    else:
        return np.asarray(params, dtype=float).ravel()
    chunks = [parts[k].ravel() for k in ("weights", "means", "scales") if k not in frozen]
    return np.concatenate(chunks) if chunks else np.zeros(0)


# -- Gaussian mixture ---------------------------------------------------------


def _masses(resp):
    nk = resp.sum(axis=0)
    for j, mass in enumerate(nk):
        if mass < MIN_MASS:
            raise DegenerateComponentError(j, float(mass))
    return nk


def gmm_em_update(
    data: Dataset,
    params: GmmParams,
    frozen=frozenset(),
    noisy_samples=None,
    resp=None,
    noise_target: str = NOISE_SCALE_ONLY,
) -> GmmParams:
    """One EM step for a diagonal Gaussian mixture.

    The variance update is centred on the updated mean (the frozen mean
    when means are held fixed), which makes K=1 land on the MLE in one step.
    ``noise_target`` picks which statistics see ``noisy_samples``: only the
    variances (``"scale"``) or weights-free statistics for means and
    variances alike (``"all"``).
    """
    frozen = normalize_frozen(frozen)
    if params.is_full:
        raise InputError("EM updates are implemented for diagonal covariances only")
    y = data.samples
    if y.shape[1] != params.dim:
        raise InputError("data and model dimensions differ")
    noisy = y if noisy_samples is None else np.asarray(noisy_samples, dtype=float)
    if resp is None:
        resp = responsibility_matrix(params, y)
    nk = _masses(resp)

    weights = params.weights if "weights" in frozen else nk / y.shape[0]
    if "means" in frozen:
        means = params.means
    else:
        src = noisy if noise_target == NOISE_ALL else y
        means = (resp.T @ src) / nk[:, None]
    if "scales" in frozen:
        var = params.covariances
    else:
        var = np.empty_like(params.covariances)
        for j in range(params.n_components):
            diff = noisy - means[j]
            var[j] = (resp[:, j:j + 1] * diff * diff).sum(axis=0) / nk[j]
        floor = VARIANCE_FLOOR * np.maximum(y.var(axis=0), 1e-300)
        var = np.maximum(var, floor[None, :])
    if "weights" not in frozen:
        weights = weights / weights.sum()
    return GmmParams(weights, means, var)


def gmm_q(samples, resp, params: GmmParams) -> float:
    """Q(params | current) = sum_ij r_ij ln[alpha_j f(y_i | j)]."""
    with np.errstate(divide="ignore"):
        lw = np.log(params.weights)
    lj = lw[None, :] + component_log_pdf(params, samples)
    return float(np.sum(np.where(resp > 0, resp * lj, 0.0)))


# -- Cauchy mixture -----------------------------------------------------------


def cmm_q(samples, resp, params: CmmParams) -> float:
    with np.errstate(divide="ignore"):
        lw = np.log(params.weights)
    lj = lw[None, :] + component_log_pdf(params, samples)
    return float(np.sum(np.where(resp > 0, resp * lj, 0.0)))


def cmm_q_gradient(samples, resp, params: CmmParams):
    """Partial derivatives of Q with respect to locations and dispersions.

    Returns two K x d arrays (dQ/dm, dQ/dd).
    """
    y = np.atleast_2d(np.asarray(samples, dtype=float))
    d = params.dispersions[None]
    u = (y[:, None, :] - params.locations[None]) / d
    r = resp[:, :, None]
    g_loc = (r * 2.0 * u / (d * (1.0 + u * u))).sum(axis=0)
    g_disp = (r * (-1.0 + 2.0 * u * u / (1.0 + u * u)) / d).sum(axis=0)
    return g_loc, g_disp


def cmm_gem_update(
    data: Dataset,
    params: CmmParams,
    step: float = 2.0,
    frozen=frozenset({"weights", "means"}),
    noisy_samples=None,
    resp=None,
):
    """One GEM step for a Cauchy mixture. Returns ``(params, stalled)``.

    Weights (if free) take their closed-form maximizer. Locations and
    log-dispersions move along the gradient of Q scaled per component by
    its responsibility mass; the step is halved until Q does not decrease.
    After 40 failed halvings the input comes back with ``stalled=True``.
    """
    if step <= 0:
        raise InputError("GEM step must be positive")
    frozen = normalize_frozen(frozen)
    y = data.samples
    noisy = y if noisy_samples is None else np.asarray(noisy_samples, dtype=float)
    if resp is None:
        resp = responsibility_matrix(params, y)
    nk = _masses(resp)

    base = params
    if "weights" not in frozen:
        w = nk / y.shape[0]
        base = params.replace(weights=w / w.sum())
    q0 = cmm_q(noisy, resp, params)
    g_loc, g_disp = cmm_q_gradient(noisy, resp, base)
    d = base.dispersions
    dir_loc = np.zeros_like(d) if "means" in frozen else d * d * g_loc / nk[:, None]
    dir_log = np.zeros_like(d) if "scales" in frozen else d * g_disp / nk[:, None]
    if not np.any(dir_loc) and not np.any(dir_log):
        if cmm_q(noisy, resp, base) >= q0:
            return base, False
        return params, True

    s = float(step)
    for _ in range(MAX_HALVINGS):
        cand = base.replace(locations=base.locations + s * dir_loc,
                            dispersions=d * np.exp(s * dir_log))
        if cmm_q(noisy, resp, cand) >= q0:
            return cand, False
        s *= 0.5
    return params, True


# -- censored gamma -----------------------------------------------------------


def censored_conditional_mean(y, censor, theta, alpha):
    """E[X | Y=y] for Y = min(X, C) with X ~ gamma(alpha, theta).

    Uncensored values are returned as they are. At the censor point the
    result is the gamma tail mean, via the regularized upper incomplete
    gamma ratio (C + theta when alpha = 1).
    """
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr > censor):
        raise InputError("observations cannot exceed the censor point")
    x = censor / theta
    q0 = special.gammaincc(alpha, x)
    if q0 > 0:
        tail = theta * alpha * special.gammaincc(alpha + 1.0, x) / q0
    else:
        # far tail: the tail mean approaches C + theta (1 + (alpha-1)/x)
        tail = censor + theta * (1.0 + (alpha - 1.0) / x)
    out = np.where(y_arr >= censor, tail, y_arr)
    return float(out) if out.ndim == 0 else out


def censored_gamma_em_update(data: Dataset, params: CensoredGammaParams,
                             noisy_samples=None) -> CensoredGammaParams:
    """theta <- (1 / (M alpha)) sum_i E[X | y_i, theta_t].

    Censored samples contribute the tail mean at the current theta. With
    ``noisy_samples`` the uncensored values are replaced by their noisy
    copies; the censoring pattern comes from the clean data.
    """
    y = data.samples[:, 0]
    cens = _censored_mask(params, data)
    vals = y if noisy_samples is None else np.asarray(noisy_samples, dtype=float).reshape(-1)
    tail = censored_conditional_mean(params.censor, params.censor, params.theta, params.alpha)
    total = np.where(cens, tail, vals).sum()
    theta = total / (y.shape[0] * params.alpha)
    if not math.isfinite(theta) or theta > THETA_LIMIT:
        raise DivergenceError(f"scale estimate diverged to {theta:.3g}")
    return params.replace(theta=theta)


def gamma_q(data: Dataset, params: CensoredGammaParams, current: CensoredGammaParams,
            noisy_samples=None) -> float:
    """theta-dependent part of Q(params | current) for the censored gamma model."""
    y = data.samples[:, 0]
    cens = _censored_mask(current, data)
    vals = y if noisy_samples is None else np.asarray(noisy_samples, dtype=float).reshape(-1)
    tail = censored_conditional_mean(current.censor, current.censor, current.theta, current.alpha)
    t = np.where(cens, tail, vals)
    return float(-t.sum() / params.theta - y.shape[0] * params.alpha * math.log(params.theta))


def q_function(data: Dataset, current: ModelParams, noisy_samples=None, resp=None) -> Callable:
    """Q(. | current) as a callable, with sufficient statistics from ``noisy_samples`` if given."""
    if isinstance(current, CensoredGammaParams):
        return lambda p: gamma_q(data, p, current, noisy_samples)
    y = data.samples if noisy_samples is None else noisy_samples
    if resp is None:
        resp = responsibility_matrix(current, data.samples)
    if isinstance(current, GmmParams):
        return lambda p: gmm_q(y, resp, p)
    if isinstance(current, CmmParams):
        return lambda p: cmm_q(y, resp, p)
    raise InputError(f"unsupported model {type(current).__name__}")


# -- MAP step -----------------------------------------------------------------


class _Packer:
    """Unconstrained coordinates for the free parameters of a model."""

    def __init__(self, params, frozen):
        self.params = params
        self.frozen = frozen

    def pack(self, p):
        if isinstance(p, CensoredGammaParams):
            return np.array([math.log(p.theta)])
        loc = p.means if isinstance(p, GmmParams) else p.locations
        scale = np.log(p.covariances if isinstance(p, GmmParams) else p.dispersions)
        parts = []
        if "weights" not in self.frozen:
            with np.errstate(divide="ignore"):
                parts.append(np.maximum(np.log(p.weights), -700.0))
        if "means" not in self.frozen:
            parts.append(loc.ravel())
        if "scales" not in self.frozen:
            parts.append(scale.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, v):
        p = self.params
        if isinstance(p, CensoredGammaParams):
            return p.replace(theta=float(np.exp(v[0])))
        k, d = (p.means if isinstance(p, GmmParams) else p.locations).shape
        i = 0
        changes = {}
        if "weights" not in self.frozen:
            lw = v[i:i + k]
            changes["weights"] = np.exp(lw - special.logsumexp(lw))
            i += k
        if "means" not in self.frozen:
            changes["means" if isinstance(p, GmmParams) else "locations"] = v[i:i + k * d].reshape(k, d)
            i += k * d
        if "scales" not in self.frozen:
            changes["covariances" if isinstance(p, GmmParams) else "dispersions"] = \
                np.exp(v[i:i + k * d]).reshape(k, d)
        return p.replace(**changes)


def map_step(data, params, candidate, q_of, log_prior, frozen):
    """Best of (current, EM candidate, numerical optimum) on Q + log prior."""
    def objective(p):
        val = q_of(p) + float(log_prior(p))
        return val if math.isfinite(val) else -math.inf

    packer = _Packer(params, frozen)
    x0 = packer.pack(candidate)
    options = [params, candidate]
    if x0.size:
        def neg(v):
            try:
                return -objective(packer.unpack(v))
            except (InputError, FloatingPointError, OverflowError):
                return math.inf
        res = optimize.minimize(neg, x0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        try:
            options.append(packer.unpack(res.x))
        except InputError:
            pass
    scores = [objective(p) for p in options]
    return options[int(np.argmax(scores))]


# -- the loop -----------------------------------------------------------------


@dataclass(frozen=True)
class UpdateOptions:
    frozen: frozenset = frozenset()
    gem_step: float = 2.0
    noise_target: str = NOISE_SCALE_ONLY
    log_prior: Optional[Callable] = None


def model_step(data: Dataset, params: ModelParams, opts: UpdateOptions, noisy_samples=None):
    """Dispatch one (G)EM or MAP step by model type. Returns ``(params, stalled)``."""
    stalled = False
    resp = None
    if isinstance(params, GmmParams):
        resp = responsibility_matrix(params, data.samples)
        new = gmm_em_update(data, params, opts.frozen, noisy_samples, resp, opts.noise_target)
    elif isinstance(params, CmmParams):
        resp = responsibility_matrix(params, data.samples)
        new, stalled = cmm_gem_update(data, params, opts.gem_step, opts.frozen, noisy_samples, resp)
    elif isinstance(params, CensoredGammaParams):
        new = censored_gamma_em_update(data, params, noisy_samples)
    else:
        raise InputError(f"unsupported model {type(params).__name__}")
    if opts.log_prior is not None:
        q_of = q_function(data, params, noisy_samples, resp)
        new = map_step(data, params, new, q_of, opts.log_prior, opts.frozen)
    return new, stalled


def converged(stop: StopRule, old, new, ll_old, ll_new, frozen) -> bool:
    if stop.criterion == "loglik":
        return abs(ll_new - ll_old) < stop.tol
    return float(np.linalg.norm(free_vector(new, frozen) - free_vector(old, frozen))) < stop.tol


def run_em(init: ModelParams, data: Dataset, stop: StopRule = StopRule(), frozen=frozenset(),
           log_prior: Optional[Callable] = None, gem_step: float = 2.0,
           noise_target: str = NOISE_SCALE_ONLY) -> RunTrace:
    """Iterate (G)EM from ``init`` until ``stop`` fires.

    The convergence time is ``trace.converged_at``: the first iteration t
    whose estimate is within tolerance of iteration t-1.
    """
    opts = UpdateOptions(normalize_frozen(frozen), gem_step, noise_target, log_prior)
    trace = RunTrace()
    params = init
    ll = observed_log_likelihood(params, data)
    trace.record(params, ll, 0.0)
    for t in range(1, stop.max_iters + 1):
        new, stalled = model_step(data, params, opts)
        trace.stalled_steps += stalled
        ll_new = observed_log_likelihood(new, data)
        trace.record(new, ll_new, 0.0)
        done = converged(stop, params, new, ll, ll_new, opts.frozen)
        params, ll = new, ll_new
        if done:
            trace.converged_at = t
            break
    return trace
