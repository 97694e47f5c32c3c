"""Admissible-noise geometry and noise sources.

For Gaussian or Cauchy mixtures with shared per-coordinate scale, a noise
value n helps a sample y for every component j iff n^2 <= 2 n (mu_j - y)
coordinate-wise. The solution set is a box around 0 per coordinate:
[0, 2 min_j(mu_j - y)] when y lies below every mean, the mirror image when
y lies above every mean, and the single point {0} otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InputError
from .mixtures import Dataset, GmmParams, MixtureParams, log_joint, sample_dataset

MIN_ACCEPT = 0.01
GOLDEN_Z0 = 0.123456789


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class NemBox:
    """Per-coordinate admissible noise intervals [lower, upper] around 0."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > 0) or np.any(hi < 0):
            raise InputError("box intervals must contain 0")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def intervals(self):
        return list(zip(self.lower.tolist(), self.upper.tolist()))

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def far_corner(self) -> np.ndarray:
        """The nonzero endpoint of each interval (0 for degenerate ones)."""
        return self.lower + self.upper

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.lower == 0) and np.all(self.upper == 0))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, n, atol: float = 0.0) -> bool:
        n = np.atleast_1d(np.asarray(n, dtype=float))
        return bool(np.all(n >= self.lower - atol) and np.all(n <= self.upper + atol))


def nem_boxes(samples, means):
    """Vectorized box bounds for every row of ``samples``: (lower, upper), M x d."""
    y = np.atleast_2d(np.asarray(samples, dtype=float))
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    if mu.shape[1] != y.shape[1]:
        if y.shape[0] == 1 and y.shape[1] == mu.shape[0] and mu.shape[1] == 1:
            y = y.T
        else:
            raise InputError("samples and means have different dimensions")
    gap = mu[None, :, :] - y[:, None, :]  # M x K x d
    lower = np.where((gap < 0).all(axis=1), 2.0 * gap.max(axis=1), 0.0)
    upper = np.where((gap > 0).all(axis=1), 2.0 * gap.min(axis=1), 0.0)
    return lower, upper


def nem_box(y, means) -> NemBox:
    """Admissible noise box for one sample against component locations."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.asarray(means, dtype=float)
    if mu.ndim == 1:
        mu = mu[:, None] if y.shape[0] == 1 else mu[None, :]
    if not np.all(np.isfinite(y)):
        raise InputError("sample must be finite")
    lo, hi = nem_boxes(y[None, :], mu)
    return NemBox(lo[0], hi[0])


def jgmm_nem_contains(n, y, model: GmmParams) -> bool:
    """Check n' S_j^-1 n + 2 (y - mu_j)' S_j^-1 n <= 0 for every component."""
    n = np.atleast_1d(np.asarray(n, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    cov = model.covariances
    if not model.is_full:
        cov = np.stack([np.diag(v) for v in cov])
    for j in range(model.n_components):
        try:
            chol = np.linalg.cholesky(cov[j])
        except np.linalg.LinAlgError:
            raise InputError(f"covariance {j} is not positive definite") from None
        sn = np.linalg.solve(chol.T, np.linalg.solve(chol, n))
        val = n @ sn + 2.0 * (y - model.means[j]) @ sn
        if val > 1e-12 * max(1.0, abs(n @ sn)):
            return False
    return True


def sample_truncated_normal(lower, upper, sigma, seed) -> np.ndarray:
    """N(0, sigma^2) truncated to [lower, upper] element-wise.

    Uses rejection from the untruncated normal and switches to the
    inverse CDF where the acceptance probability drops below 1%.
    Zero-width intervals and sigma == 0 give exact zeros.
    """
    rng = _rng(seed)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    out = np.zeros(np.broadcast(lo, hi).shape)
    if sigma < 0:
        raise InputError("noise scale must be nonnegative")
    if sigma == 0:
        return out
    lo, hi = np.broadcast_to(lo, out.shape), np.broadcast_to(hi, out.shape)
    live = np.flatnonzero((hi > lo).ravel())
    if live.size == 0:
        return out
    flat_out = out.reshape(-1)
    a = lo.reshape(-1)[live] / sigma
    b = hi.reshape(-1)[live] / sigma
    pa, pb = special.ndtr(a), special.ndtr(b)
    accept = pb - pa
    slow = accept < MIN_ACCEPT
    if np.any(slow):
        u = rng.uniform(pa[slow], pb[slow])
        flat_out[live[slow]] = sigma * np.clip(special.ndtri(u), a[slow], b[slow])
    todo = np.flatnonzero(~slow)
    while todo.size:
        draw = rng.standard_normal(todo.size)
        ok = (draw >= a[todo]) & (draw <= b[todo])
        flat_out[live[todo[ok]]] = sigma * draw[ok]
        todo = todo[~ok]
    return out


def sample_nem_noise(box: NemBox, sigma: float, seed) -> np.ndarray:
    """One screened noise vector drawn coordinate-wise inside ``box``."""
    return sample_truncated_normal(box.lower, box.upper, sigma, seed)


def anneal(sigma0: float, k: int, tau: float) -> float:
    """Noise scale at iteration k: sigma0 * k**-tau."""
    if k < 1:
        raise InputError("iteration index starts at 1")
    return sigma0 * float(k) ** (-tau)


def diem_noise(box: NemBox, s_n: float, k: int, tau: float) -> np.ndarray:
    """Deterministic interference: the box centroid shrunk by s_n * k**-tau."""
    if not 0.0 <= s_n <= 1.0:
        raise InputError("deterministic noise scale must lie in [0, 1]")
    return anneal(s_n, k, tau) * box.centroid


def logistic_map(z: float) -> float:
    return 4.0 * z * (1.0 - z)


def _check_chaos_state(z):
    if not 0.0 < z < 1.0:
        raise InputError(f"logistic state {z!r} is absorbing or out of range; must lie in (0, 1)")


def chaotic_sequence(z: float, count: int):
    """``count`` successive logistic-map states starting at ``z`` and the next state."""
    _check_chaos_state(z)
    out = np.empty(count)
    for i in range(count):
        out[i] = z
        z = logistic_map(z)
    return out, z


def chaotic_fill(z: float, far, amplitude: float, k: int, tau: float):
    """Chaotic noise for an array of far-corner values.

    Each coordinate uses the current state and then advances the map once,
    so noise = k**-tau * A * z_t * far, which stays on the segment from 0
    to the far corner of its interval.
    """
    if not 0.0 <= amplitude <= 1.0:
        raise InputError("chaotic amplitude must lie in [0, 1]")
    far = np.asarray(far, dtype=float)
    states, z_next = chaotic_sequence(z, far.size)
    return anneal(amplitude, k, tau) * states.reshape(far.shape) * far, z_next


def chaotic_noise(state: float, box: NemBox, amplitude: float, k: int, tau: float):
    """One chaotic noise vector for ``box``. Returns ``(noise, next_state)``."""
    return chaotic_fill(state, box.far_corner, amplitude, k, tau)


def log_convex_noise(sigma: float, k: int, tau: float, d: int, seed) -> np.ndarray:
    """Unscreened i.i.d. N(0, (sigma k**-tau)^2) noise, independent of the data."""
    if sigma < 0:
        raise InputError("noise scale must be nonnegative")
    s = anneal(sigma, k, tau)
    if s == 0:
        return np.zeros(d)
    return s * _rng(seed).standard_normal(d)


def sample_mean_nem_statistic(data: Dataset, noise, labels, params: MixtureParams) -> float:
    """Average log ratio ln f(y+n, z | theta) - ln f(y, z | theta) over samples."""
    y = data.samples
    n = np.asarray(noise, dtype=float).reshape(y.shape)
    z = np.asarray(labels, dtype=int).ravel()
    rows = np.arange(y.shape[0])
    with np.errstate(divide="ignore"):
        noisy = log_joint(params, y + n)[rows, z]
        clean = log_joint(params, y)[rows, z]
    w = noisy - clean
    if np.any(np.isneginf(noisy)):
        warnings.warn("noise moved a sample to zero density", RuntimeWarning)
        return -math.inf
    return float(w.mean())


# -- occupation probability of the joint admissible set ----------------------


def _model_1d(model: GmmParams):
    if model.dim != 1:
        raise InputError("occupation probability is defined for 1-D mixtures")
    return model.means[:, 0]


def _joint_bounds(model: GmmParams, count: int, m: int, rng):
    """Running intersection of the boxes of m fresh samples, for ``count`` trials."""
    mu = _model_1d(model)
    y = sample_dataset(model, count * m, rng).samples.reshape(count, m)
    gap = mu[None, None, :] - y[:, :, None]
    lo = np.where((gap < 0).all(axis=2), 2.0 * gap.max(axis=2), 0.0)
    hi = np.where((gap > 0).all(axis=2), 2.0 * gap.min(axis=2), 0.0)
    return np.maximum.accumulate(lo, axis=1), np.minimum.accumulate(hi, axis=1)


def am_probability(model: GmmParams, m: int, sigma_n: float, mc_samples: int, seed,
                   chunk: int = 20000) -> float:
    """Monte Carlo P(one noise draw is admissible for all m fresh samples)."""
    if mc_samples < 1000:
        raise InputError("use at least 1000 Monte Carlo samples")
    if m < 1:
        raise InputError("sample count must be at least 1")
    rng = _rng(seed)
    hits = 0
    done = 0
    while done < mc_samples:
        c = min(chunk, mc_samples - done)
        lo, hi = _joint_bounds(model, c, m, rng)
        n = sigma_n * rng.standard_normal(c)
        hits += int(np.count_nonzero((n >= lo[:, -1]) & (n <= hi[:, -1]) & (hi[:, -1] > lo[:, -1])))
        done += c
    return hits / mc_samples


def am_probability_table(model: GmmParams, sample_counts, sigmas, mc_samples: int, seed,
                         chunk: int = 20000) -> np.ndarray:
    """P(A_M) over a grid of sample counts (rows) and noise scales (columns).

    All cells share one stream of data and one stream of standard normal
    draws, so each cell is an ordinary Monte Carlo estimate and differences
    between cells carry less noise.
    """
    if mc_samples < 1000:
        raise InputError("use at least 1000 Monte Carlo samples")
    ms = np.asarray(sample_counts, dtype=int)
    sig = np.asarray(sigmas, dtype=float)
    if ms.min() < 1:
        raise InputError("sample counts must be at least 1")
    rng = _rng(seed)
    hits = np.zeros((ms.size, sig.size))
    done = 0
    while done < mc_samples:
        c = min(chunk, mc_samples - done)
        lo, hi = _joint_bounds(model, c, int(ms.max()), rng)
        xi = rng.standard_normal(c)
        lo_m, hi_m = lo[:, ms - 1], hi[:, ms - 1]  # c x |M|
        n = xi[:, None] * sig[None, :]  # c x |sigma|
        ok = ((n[:, None, :] >= lo_m[:, :, None]) & (n[:, None, :] <= hi_m[:, :, None])
              & (hi_m > lo_m)[:, :, None])
        hits += ok.sum(axis=0)
        done += c
    return hits / mc_samples
