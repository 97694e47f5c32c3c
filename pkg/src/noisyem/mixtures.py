"""Data models: Gaussian and Cauchy mixtures, right-censored gamma data.

All densities are evaluated in log space. Mixture responsibilities use
log-sum-exp so that widely separated components never underflow to 0/0.

Component indices are 0-based throughout the package.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import integrate, special

from .errors import InputError

WEIGHT_TOL = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InputError(f"{name} must be a vector or a K x d matrix, got shape {a.shape}")
    return a


def _check_weights(weights, k):
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape != (k,):
        raise InputError(f"expected {k} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InputError("mixing weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise InputError(f"mixing weights sum to {w.sum()!r}, not 1")
    return w


@dataclass(frozen=True)
class GmmParams:
    """Gaussian mixture parameters.

    ``covariances`` is either a K x d array of per-coordinate variances
    (diagonal model) or a K x d x d stack of full covariance matrices.
    EM updates are only defined for the diagonal form; full covariances
    are used for density evaluation and NEM-set membership checks.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        means = _as_matrix(self.means, "means")
        k, d = means.shape
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 1 and d == 1:
            cov = cov[:, None]
        if cov.shape == (k, d):
            if not np.all(np.isfinite(cov)) or np.any(cov <= 0):
                raise InputError("variances must be finite and positive")
        elif cov.shape == (k, d, d):
            if not np.allclose(cov, np.swapaxes(cov, 1, 2)):
                raise InputError("full covariances must be symmetric")
            for j in range(k):
                try:
                    np.linalg.cholesky(cov[j])
                except np.linalg.LinAlgError:
                    raise InputError(f"covariance {j} is not positive definite") from None
        else:
            raise InputError(f"covariances shape {cov.shape} does not match means {means.shape}")
        object.__setattr__(self, "weights", _check_weights(self.weights, k))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_full(self) -> bool:
        return self.covariances.ndim == 3

    @property
    def stds(self) -> np.ndarray:
        if self.is_full:
            raise InputError("standard deviations are only defined for diagonal models")
        return np.sqrt(self.covariances)

    @classmethod
    def from_stds(cls, weights, means, stds):
        """Build a diagonal model from standard deviations instead of variances."""
        means = _as_matrix(means, "means")
        stds = np.broadcast_to(_as_matrix(stds, "stds"), means.shape)
        return cls(weights, means, stds**2)

    def replace(self, **changes) -> "GmmParams":
        values = {"weights": self.weights, "means": self.means, "covariances": self.covariances}
        values.update(changes)
        return GmmParams(**values)

    def location_matrix(self) -> np.ndarray:
        return self.means


@dataclass(frozen=True)
class CmmParams:
    """Cauchy mixture parameters.

    Each component is a product of independent Cauchy densities, one per
    coordinate, with medians ``locations`` and scales ``dispersions``
    (both K x d). The 1-D case is the usual Cauchy mixture.
    """

    weights: np.ndarray
    locations: np.ndarray
    dispersions: np.ndarray

    def __post_init__(self):
        loc = _as_matrix(self.locations, "locations")
        disp = np.broadcast_to(_as_matrix(self.dispersions, "dispersions"), loc.shape).copy()
        if not np.all(np.isfinite(disp)) or np.any(disp <= 0):
            raise InputError("dispersions must be finite and positive")
        object.__setattr__(self, "weights", _check_weights(self.weights, loc.shape[0]))
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "dispersions", disp)

    @property
    def n_components(self) -> int:
        return self.locations.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def replace(self, **changes) -> "CmmParams":
        values = {"weights": self.weights, "locations": self.locations, "dispersions": self.dispersions}
        values.update(changes)
        return CmmParams(**values)

    def location_matrix(self) -> np.ndarray:
        return self.locations


@dataclass(frozen=True)
class CensoredGammaParams:
    """Right-censored gamma model with known shape ``alpha``.

    Only the scale ``theta`` is estimated. Shapes in (0, 1) give a
    log-convex density.
    """

    alpha: float
    theta: float
    censor: float

    def __post_init__(self):
        for name in ("alpha", "theta", "censor"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise InputError(f"{name} must be finite and positive, got {v}")
            object.__setattr__(self, name, v)

    @property
    def log_convex(self) -> bool:
        return self.alpha < 1.0

    def replace(self, **changes) -> "CensoredGammaParams":
        values = {"alpha": self.alpha, "theta": self.theta, "censor": self.censor}
        values.update(changes)
        return CensoredGammaParams(**values)


MixtureParams = Union[GmmParams, CmmParams]
ModelParams = Union[GmmParams, CmmParams, CensoredGammaParams]


@dataclass
class Dataset:
    """Observed samples plus optional latent labels and censoring flags."""

    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    censored: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = _as_matrix(self.samples, "samples")
        if self.samples.shape[0] < 1:
            raise InputError("a dataset needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("samples must be finite")
        m = self.samples.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).ravel()
            if self.labels.shape != (m,) or np.any(self.labels < 0):
                raise InputError("labels must be M nonnegative component indices")
        if self.censored is not None:
            self.censored = np.asarray(self.censored, dtype=bool).ravel()
            if self.censored.shape != (m,):
                raise InputError("censored mask must have one entry per sample")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, n: int) -> "Dataset":
        """First ``n`` samples (used by sample-size sweeps)."""
        return Dataset(
            self.samples[:n],
            None if self.labels is None else self.labels[:n],
            None if self.censored is None else self.censored[:n],
        )


def dataset_to_csv(data: Dataset) -> str:
    """CSV with header ``dim_0,...,dim_{d-1},label,censored``; missing fields stay empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"dim_{i}" for i in range(data.dim)] + ["label", "censored"])
    for i, row in enumerate(data.samples):
        label = "" if data.labels is None else int(data.labels[i])
        cens = "" if data.censored is None else int(data.censored[i])
        w.writerow([repr(float(v)) for v in row] + [label, cens])
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError("empty dataset file")
    header = [h.strip() for h in rows[0]]
    dims = [i for i, h in enumerate(header) if h.startswith("dim_")]
    if not dims:
        raise InputError("dataset header has no dim_ columns")
    li = header.index("label") if "label" in header else None
    ci = header.index("censored") if "censored" in header else None
    body = [r for r in rows[1:] if r]
    try:
        samples = [[float(r[i]) for i in dims] for r in body]
        labels = [r[li].strip() for r in body] if li is not None else []
        cens = [r[ci].strip() for r in body] if ci is not None else []
        lab = [int(v) for v in labels] if labels and all(labels) else None
        cen = [bool(int(v)) for v in cens] if cens and all(cens) else None
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed dataset row: {exc}") from None
    return Dataset(np.array(samples), lab, cen)


def _samples(y, dim=None):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y[None, None]
    elif y.ndim == 1:
        y = y[None, :] if dim is None or y.shape[0] == dim else y[:, None]
    if not np.all(np.isfinite(y)):
        raise InputError("observations must be finite")
    return y


# -- component densities ---------------------------------------------------


def component_log_pdf(model: MixtureParams, samples) -> np.ndarray:
    """Return the M x K matrix of ln f(y_i | j, theta_j)."""
    y = _samples(samples, model.dim)
    if isinstance(model, GmmParams):
        if model.is_full:
            out = np.empty((y.shape[0], model.n_components))
            for j in range(model.n_components):
                chol = np.linalg.cholesky(model.covariances[j])
                w = np.linalg.solve(chol, (y - model.means[j]).T)
                logdet = 2.0 * np.log(np.diag(chol)).sum()
                out[:, j] = -0.5 * (model.dim * LOG_2PI + logdet + (w * w).sum(axis=0))
            return out
        var = model.covariances
        diff = y[:, None, :] - model.means[None, :, :]
        return -0.5 * (LOG_2PI + np.log(var)[None] + diff * diff / var[None]).sum(axis=2)
    if isinstance(model, CmmParams):
        u = (y[:, None, :] - model.locations[None]) / model.dispersions[None]
        return (-np.log(math.pi * model.dispersions)[None] - np.log1p(u * u)).sum(axis=2)
    raise InputError(f"not a mixture model: {type(model).__name__}")


def log_joint(model: MixtureParams, samples) -> np.ndarray:
    """M x K matrix of ln[alpha_j f(y_i | j, theta_j)]."""
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return log_w[None, :] + component_log_pdf(model, samples)


def mixture_log_pdf(model: MixtureParams, samples) -> np.ndarray:
    """ln f(y_i | Theta) for every row of ``samples``."""
    return special.logsumexp(log_joint(model, samples), axis=1)


def eval_mixture_pdf(model: MixtureParams, y) -> float:
    """Mixture density f(y | Theta) at a single point."""
    y = _samples(y, model.dim)
    if y.shape[0] != 1:
        raise InputError("eval_mixture_pdf takes a single observation; use mixture_log_pdf")
    return float(np.exp(mixture_log_pdf(model, y)[0]))


def responsibility_matrix(model: MixtureParams, samples) -> np.ndarray:
    """Posterior memberships p_Z(j | y_i, Theta), computed in log space."""
    lj = log_joint(model, samples)
    return np.exp(lj - special.logsumexp(lj, axis=1, keepdims=True))


def responsibilities(model: MixtureParams, y) -> np.ndarray:
    """K-vector of posterior memberships for one observation."""
    y = _samples(y, model.dim)
    if y.shape[0] != 1:
        raise InputError("responsibilities takes a single observation; use responsibility_matrix")
    return responsibility_matrix(model, y)[0]


def complete_log_likelihood(model: MixtureParams, y, z: int) -> float:
    """ln f(y, z | Theta) = ln alpha_z + ln f(y | z, theta_z).

    Returns ``-inf`` (with a RuntimeWarning) when alpha_z is zero.
    """
    if not 0 <= z < model.n_components:
        raise InputError(f"component index {z} out of range for K={model.n_components}")
    y = _samples(y, model.dim)
    if model.weights[z] == 0.0:
        warnings.warn(f"component {z} has zero weight; complete log-likelihood is -inf", RuntimeWarning)
        return -math.inf
    return float(math.log(model.weights[z]) + component_log_pdf(model, y)[0, z])


def observed_log_likelihood(model: ModelParams, data: Dataset) -> float:
    """L(Theta | y): the incomplete-data log-likelihood of the whole sample."""
    if isinstance(model, CensoredGammaParams):
        return censored_gamma_log_likelihood(model, data)
    return float(mixture_log_pdf(model, data.samples).sum())


# -- censored gamma ---------------------------------------------------------


def gamma_log_pdf(x, alpha, theta):
    x = np.asarray(x, dtype=float)
    return (alpha - 1.0) * np.log(x) - x / theta - special.gammaln(alpha) - alpha * math.log(theta)


def gamma_log_survival(c, alpha, theta):
    """ln P(X >= c) for X ~ gamma(alpha, theta)."""
    q = special.gammaincc(alpha, c / theta)
    if q > 0:
        return math.log(q)
    # far tail: ln Gamma(alpha, x) ~ (alpha-1) ln x - x - ln Gamma(alpha)
    x = c / theta
    return (alpha - 1.0) * math.log(x) - x - special.gammaln(alpha)


def censored_gamma_log_likelihood(model: CensoredGammaParams, data: Dataset) -> float:
    y = data.samples[:, 0]
    cens = _censored_mask(model, data)
    ll = gamma_log_pdf(y[~cens], model.alpha, model.theta).sum()
    ll += cens.sum() * gamma_log_survival(model.censor, model.alpha, model.theta)
    return float(ll)


def _censored_mask(model: CensoredGammaParams, data: Dataset) -> np.ndarray:
    if data.censored is not None:
        return data.censored
    return data.samples[:, 0] >= model.censor


# -- sampling ---------------------------------------------------------------


def sample_dataset(model: ModelParams, m: int, seed) -> Dataset:
    """Draw ``m`` labelled samples; deterministic for a fixed seed.

    Censored gamma draws are clipped at the censor point with the mask set
    where clipping happened.
    """
    if m < 1:
        raise InputError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(model, CensoredGammaParams):
        # numpy's gamma generator handles alpha < 1 by shape augmentation
        x = rng.gamma(model.alpha, model.theta, size=m)
        cens = x >= model.censor
        return Dataset(np.minimum(x, model.censor)[:, None], censored=cens)
    labels = rng.choice(model.n_components, size=m, p=model.weights)
    if isinstance(model, GmmParams):
        if model.is_full:
            z = rng.standard_normal((m, model.dim))
            chol = np.linalg.cholesky(model.covariances)
            samples = model.means[labels] + np.einsum("mij,mj->mi", chol[labels], z)
        else:
            samples = model.means[labels] + model.stds[labels] * rng.standard_normal((m, model.dim))
    elif isinstance(model, CmmParams):
        samples = model.locations[labels] + model.dispersions[labels] * rng.standard_cauchy((m, model.dim))
    else:
        raise InputError(f"cannot sample from {type(model).__name__}")
    return Dataset(samples, labels=labels)


# -- relative entropy -------------------------------------------------------


def _integration_box(p: GmmParams, q: GmmParams, span: float):
    mus = np.vstack([p.means, q.means])
    sd = np.sqrt(np.concatenate([np.atleast_2d(p.covariances.reshape(p.n_components, -1)),
                                 np.atleast_2d(q.covariances.reshape(q.n_components, -1))]))
    lo = mus.min(axis=0) - span * sd.max()
    hi = mus.max(axis=0) + span * sd.max()
    return lo, hi


def _kl_on_grid(p, q, lo, hi, n):
    d = p.dim
    axes = [np.linspace(lo[i], hi[i], n) for i in range(d)]
    if d == 1:
        pts = axes[0][:, None]
    else:
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    lp = mixture_log_pdf(p, pts)
    lq = mixture_log_pdf(q, pts)
    dens = np.exp(lp)
    with np.errstate(invalid="ignore"):
        integrand = np.where(dens > 0, dens * (lp - lq), 0.0)
    if np.any(np.isinf(integrand) & (integrand > 0)):
        return math.inf
    integrand = integrand.reshape((n,) * d)
    for axis in reversed(range(d)):
        integrand = integrate.trapezoid(integrand, axes[axis], axis=axis)
    return float(integrand)


def relative_entropy(p: GmmParams, q: GmmParams, n_points: int = 4097, span: float = 8.0,
                     rtol: float = 1e-9) -> float:
    """D(p || q) for 1-D or 2-D Gaussian mixtures by refined trapezoid rule.

    The grid spans ``span`` of the largest standard deviation beyond the
    extreme means of both models. The grid is doubled until successive
    estimates agree to ``rtol``. Returns ``inf`` when q vanishes where p
    has mass.
    """
    if p.dim != q.dim:
        raise InputError("models must share a dimension")
    if p.dim > 2:
        raise InputError("relative_entropy supports 1-D and 2-D models")
    if n_points < 4096 and p.dim == 1:
        raise InputError("use at least 4096 grid points")
    lo, hi = _integration_box(p, q, span)
    n = n_points if p.dim == 1 else max(257, int(math.sqrt(n_points)) + 1)
    prev = _kl_on_grid(p, q, lo, hi, n)
    limit = 1 << 20 if p.dim == 1 else 2049
    while math.isfinite(prev) and 2 * n - 1 <= limit:
        n = 2 * n - 1
        cur = _kl_on_grid(p, q, lo, hi, n)
        if abs(cur - prev) <= rtol * max(1.0, abs(cur)):
            return max(cur, 0.0) if cur > -1e-9 else cur
        prev = cur
    return max(prev, 0.0) if prev > -1e-9 else prev


def gmm_kl_closed_form(p: GmmParams, q: GmmParams) -> float:
    """Exact D(p || q) for single-component diagonal Gaussians."""
    if p.n_components != 1 or q.n_components != 1 or p.is_full or q.is_full:
        raise InputError("closed form only for single diagonal Gaussians")
    vp, vq = p.covariances[0], q.covariances[0]
    dm = p.means[0] - q.means[0]
    return float(0.5 * np.sum(np.log(vq / vp) + (vp + dm * dm) / vq - 1.0))
