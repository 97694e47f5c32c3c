"""Clustering built on mixture EM: naive Bayes labelling, k-means, and
competitive learning (unsupervised, supervised, differential), each with
optional annealed noise injection.

Ties between equally near centroids always go to the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .em import RunTrace, StopRule
from .errors import InputError, ScheduleExhaustedError
from .mixtures import Dataset, GmmParams, responsibility_matrix
from .nem import BLIND, LOG_CONVEX, NEM, NONE, NoisePolicy
from .noise import anneal, nem_boxes, sample_truncated_normal

COMPETITIVE_MODES = ("ucl", "scl", "dcl")


@dataclass
class Centroids:
    points: np.ndarray
    assignments: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1 or not np.all(np.isfinite(self.points)):
            raise InputError("centroids must be a finite, non-empty K x d matrix")

    @property
    def k(self) -> int:
        return self.points.shape[0]


def squared_distances(samples, points) -> np.ndarray:
    y = np.atleast_2d(samples)
    diff = y[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=2)


def nearest(samples, points) -> np.ndarray:
    """Index of the nearest centroid for every sample (argmin keeps the first tie)."""
    return squared_distances(samples, points).argmin(axis=1)


def centroid_means(samples, assign, old_points) -> np.ndarray:
    """Per-cluster means; a cluster with no members keeps its old centroid."""
    # same arithmetic as the EM mean step on one-hot memberships
    onehot = np.zeros((len(assign), old_points.shape[0]))
    onehot[np.arange(len(assign)), assign] = 1.0
    sums = onehot.T @ samples
    counts = onehot.sum(axis=0)
    out = old_points.copy()
    live = counts > 0
    out[live] = sums[live] / counts[live, None]
    return out


def kmeans_update(data: Dataset, centroids: Centroids) -> Centroids:
    """Assign every sample to its nearest centroid, then move centroids to the means."""
    if centroids.k > len(data):
        raise InputError("more centroids than samples")
    assign = nearest(data.samples, centroids.points)
    return Centroids(centroid_means(data.samples, assign, centroids.points), assign)


def kmeans_objective(samples, points, assign=None) -> float:
    """Total within-cluster squared distance."""
    if assign is None:
        assign = nearest(samples, points)
    diff = samples - points[assign]
    return float((diff * diff).sum())


def hard_responsibilities(samples, points) -> np.ndarray:
    """One-hot membership matrix of the nearest-centroid partition."""
    assign = nearest(samples, points)
    r = np.zeros((len(assign), points.shape[0]))
    r[np.arange(len(assign)), assign] = 1.0
    return r


def run_noisy_kmeans(data: Dataset, k: int, policy: NoisePolicy = NoisePolicy(),
                     stop: StopRule = StopRule(), seed=0, assign_on: str = "noisy",
                     init=None) -> RunTrace:
    """k-means from the first ``k`` samples with annealed noise on the samples.

    Each iteration perturbs a fresh copy of the data. Assignments use the
    clean samples (``assign_on="clean"``) or the noisy copy (``"noisy"``);
    centroids are the means of the noisy members. The run converges when
    the assignments repeat or the centroids move less than the tolerance.
    ``logliks`` holds the negated within-cluster squared distance.
    """
    if policy.kind not in (BLIND, LOG_CONVEX, NEM, NONE):
        raise InputError(f"k-means supports blind, screened or no noise, not {policy.kind}")
    if assign_on not in ("clean", "noisy"):
        raise InputError("assign_on must be 'clean' or 'noisy'")
    y = data.samples
    if not 1 <= k <= y.shape[0]:
        raise InputError("need 1 <= K <= M")
    rng = np.random.default_rng(seed)
    points = (y[:k] if init is None else np.asarray(init, dtype=float)).copy()
    trace = RunTrace()
    trace.record(points.copy(), -kmeans_objective(y, points), 0.0)
    prev = None
    for t in range(1, stop.max_iters + 1):
        scale = anneal(policy.level, t, policy.tau)
        z = y
        if scale > 0:
            if policy.kind == NEM:
                lo, hi = nem_boxes(y, points)
                z = y + sample_truncated_normal(lo, hi, scale, rng)
            else:
                z = y + scale * rng.standard_normal(y.shape)
        assign = nearest(y if assign_on == "clean" else z, points)
        new = centroid_means(z, assign, points)
        shift = float(np.linalg.norm(new - points))
        points = new
        trace.record(points.copy(), -kmeans_objective(y, points), scale)
        if (prev is not None and np.array_equal(assign, prev)) or shift < stop.tol:
            trace.converged_at = t
            break
        prev = assign
    return trace


def naive_bayes_classify(model: GmmParams, y) -> int:
    """argmax_j of the posterior membership, lowest index on ties."""
    return int(responsibility_matrix(model, np.atleast_2d(y))[0].argmax())


def classify_all(model: GmmParams, samples) -> np.ndarray:
    return responsibility_matrix(model, samples).argmax(axis=1)


def misclassification_rate(model_a: GmmParams, model_b: GmmParams, data: Dataset) -> float:
    """Fraction of samples the two classifiers label differently."""
    if model_a.n_components != model_b.n_components:
        raise InputError("models must have the same number of components")
    a = classify_all(model_a, data.samples)
    b = classify_all(model_b, data.samples)
    return float(np.mean(a != b))


# -- competitive learning -----------------------------------------------------


@dataclass
class CompetitiveState:
    """Synaptic vectors plus the linearly decaying learning rate c_t = c0 (1 - t/T)."""

    weights: np.ndarray
    t: int = 0
    c0: float = 0.3
    horizon: int = 1500
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float)).copy()
        if not np.all(np.isfinite(self.weights)):
            raise InputError("weights must be finite")

    @property
    def rate(self) -> float:
        return self.c0 * (1.0 - self.t / self.horizon)


def _winner_update(mode, w, z, c, label=None, prev=None) -> int:
    """Apply one competitive-learning move to ``w`` in place; returns the winner."""
    diff = w - z
    j = int(np.einsum("kd,kd->k", diff, diff).argmin())
    if mode == "ucl":
        sign = 1.0
    elif mode == "scl":
        if label is None:
            raise InputError("supervised learning needs the sample's class")
        sign = 1.0 if int(label) == j else -1.0
    else:
        if prev is None:
            raise InputError("differential learning needs the previous sample")
        i = j % z.shape[0]
        sign = float(np.sign(z[i] - prev[i]))
    w[j] -= c * sign * diff[j]
    return j


def competitive_step(mode: str, state: CompetitiveState, z, label: Optional[int] = None,
                     prev=None, rate: Optional[float] = None) -> CompetitiveState:
    """Move the nearest synaptic vector toward (or away from) sample ``z``.

    ``rate`` overrides the schedule. ``scl`` needs the sample's class
    ``label`` (reward +1 when it matches the winner index, -1 otherwise).
    ``dcl`` needs the previous sample ``prev`` and uses the sign of the
    change in the coordinate ``winner mod d``.
    """
    mode = mode.lower()
    if mode not in COMPETITIVE_MODES:
        raise InputError(f"unknown competitive mode {mode!r}")
    c = state.rate if rate is None else float(rate)
    if c < 0:
        raise ScheduleExhaustedError(f"learning rate {c:.3g} < 0 at step {state.t}")
    z = np.asarray(z, dtype=float).ravel()
    w = state.weights.copy()
    _winner_update(mode, w, z, c, label, None if prev is None else np.asarray(prev, dtype=float).ravel())
    return CompetitiveState(w, state.t + 1, state.c0, state.horizon)


@dataclass(frozen=True)
class StreamSpec:
    """Gaussian clusters with shared isotropic spread feeding a sample stream."""

    centers: np.ndarray
    spread: float = 4.0
    weights: Optional[np.ndarray] = None

    def draw(self, count: int, rng):
        centers = np.asarray(self.centers, dtype=float)
        k = centers.shape[0]
        p = None if self.weights is None else np.asarray(self.weights, dtype=float)
        labels = rng.choice(k, size=count, p=p)
        return centers[labels] + self.spread * rng.standard_normal((count, centers.shape[1])), labels


def rotated_square(side: float = 24.0, angle: float = math.pi / 4) -> np.ndarray:
    """Vertices of a square of the given side centred at the origin, rotated by ``angle``."""
    h = side / 2.0
    base = np.array([[h, h], [h, -h], [-h, h], [-h, -h]])
    c, s = math.cos(angle), math.sin(angle)
    return base @ np.array([[c, -s], [s, c]]).T


def settle_time(history, frac: float = 0.25) -> int:
    """First step after which the weights stay within ``frac`` of their final value.

    Closeness is ||W(t) - W(T)|| <= frac * ||W(T)|| over the whole weight matrix.
    """
    h = np.asarray(history, dtype=float)
    final = h[-1]
    gap = np.linalg.norm((h - final[None]).reshape(h.shape[0], -1), axis=1)
    bad = np.flatnonzero(gap > frac * np.linalg.norm(final))
    return int(bad[-1] + 1) if bad.size else 0


def competitive_noise_std(policy: NoisePolicy, t: int, schedule: str = "variance") -> float:
    """Noise std at step t.

    ``"variance"`` anneals the variance as sigma0 * t**-tau; ``"std"``
    anneals the standard deviation itself.
    """
    if schedule == "variance":
        return math.sqrt(anneal(policy.level, t, policy.tau))
    if schedule == "std":
        return anneal(policy.level, t, policy.tau)
    raise InputError(f"unknown noise schedule {schedule!r}")


def run_noisy_competitive(mode: str, stream: StreamSpec, policy: NoisePolicy = NoisePolicy(),
                          steps: int = 1500, seed=0, c0: float = 0.3, schedule: str = "variance",
                          settle_frac: float = 0.25, noise_seed=None) -> RunTrace:
    """Train K synaptic vectors on a stream of ``steps`` noisy samples.

    The stream comes from ``seed`` and the noise from ``noise_seed`` (derived
    from ``seed`` when omitted). The first K samples initialize the vectors.
    ``converged_at`` is the settle time of the weight history. ``logliks`` holds the negated
    squared distance from each training sample to its winner.
    """
    if policy.kind not in (BLIND, LOG_CONVEX, NONE):
        raise InputError("competitive learning takes unscreened Gaussian noise or none")
    k = np.asarray(stream.centers).shape[0]
    if steps < k:
        raise InputError("need at least K steps")
    rng = np.random.default_rng(seed)
    y, labels = stream.draw(steps, rng)
    derived = rng.integers(2**63)
    noise_rng = np.random.default_rng(derived if noise_seed is None else noise_seed)
    mode = mode.lower()
    if mode not in COMPETITIVE_MODES:
        raise InputError(f"unknown competitive mode {mode!r}")
    w = y[:k].copy()
    trace = RunTrace()
    history = np.empty((steps + 1, k, y.shape[1]))
    history[0] = w
    trace.record(w.copy(), 0.0, 0.0)
    noise = noise_rng.standard_normal(y.shape)
    prev_z = None
    for t in range(1, steps + 1):
        s = competitive_noise_std(policy, t, schedule) if policy.level > 0 else 0.0
        z = y[t - 1] + s * noise[t - 1] if s > 0 else y[t - 1]
        c = c0 * (1.0 - (t - 1) / steps)
        if c < 0:
            raise ScheduleExhaustedError(f"learning rate {c:.3g} < 0 at step {t}")
        if mode != "dcl" or prev_z is not None:
            j = _winner_update(mode, w, z, c, labels[t - 1], prev_z)
            gap = float(((z - w[j]) ** 2).sum())
        else:
            gap = float(squared_distances(z[None, :], w).min())
        prev_z = z
        history[t] = w
        trace.record(w.copy(), -gap, s)
    trace.converged_at = settle_time(history, settle_frac)
    return trace

