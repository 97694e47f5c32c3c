"""Slow, independent reference implementations used to check the library.

Everything here is written with scipy.stats densities and explicit loops,
sharing no code with the package under test.
"""

import math

import numpy as np
from scipy import integrate, stats


def gmm_pdf(weights, means, stds, y):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    total = 0.0
    for w, mu, sd in zip(weights, means, stds):
        total += w * np.prod(stats.norm.pdf(y, np.atleast_1d(mu), np.atleast_1d(sd)))
    return float(total)


def cmm_pdf(weights, locs, disps, y):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    total = 0.0
    for w, m, d in zip(weights, locs, disps):
        total += w * np.prod(stats.cauchy.pdf(y, np.atleast_1d(m), np.atleast_1d(d)))
    return float(total)


def gmm_em_step_1d(y, weights, means, stds, frozen=()):
    """Textbook EM step for a 1-D Gaussian mixture, written with loops."""
    y = list(map(float, y))
    k = len(weights)
    resp = []
    for yi in y:
        num = [weights[j] * stats.norm.pdf(yi, means[j], stds[j]) for j in range(k)]
        s = sum(num)
        resp.append([v / s for v in num])
    nk = [sum(r[j] for r in resp) for j in range(k)]
    new_w = list(weights) if "weights" in frozen else [nk[j] / len(y) for j in range(k)]
    new_mu = list(means) if "means" in frozen else [
        sum(r[j] * yi for r, yi in zip(resp, y)) / nk[j] for j in range(k)]
    new_var = [stds[j] ** 2 for j in range(k)] if "scales" in frozen else [
        sum(r[j] * (yi - new_mu[j]) ** 2 for r, yi in zip(resp, y)) / nk[j] for j in range(k)]
    return new_w, new_mu, new_var


def dominates_all(y, n, means, scales, family="gauss"):
    """True iff f(y+n | j) >= f(y | j) for every component j."""
    pdf = stats.norm.pdf if family == "gauss" else stats.cauchy.pdf
    return all(pdf(y + n, m, s) >= pdf(y, m, s) for m, s in zip(means, scales))


def gamma_tail_mean(censor, theta, alpha):
    num = integrate.quad(lambda x: x * stats.gamma.pdf(x, alpha, scale=theta), censor, np.inf,
                         epsabs=1e-13, epsrel=1e-13)[0]
    return num / stats.gamma.sf(censor, alpha, scale=theta)


def truncnorm_moments(lo, hi, sigma):
    d = stats.truncnorm(lo / sigma, hi / sigma, scale=sigma)
    return float(d.mean()), float(d.std())


def kmeans_step(points, centroids):
    """Nearest-centroid assignment (first index on ties) and mean update, with loops."""
    k = len(centroids)
    assign = []
    for p in points:
        best, best_d = 0, math.inf
        for j, c in enumerate(centroids):
            d = sum((a - b) ** 2 for a, b in zip(p, c))
            if d < best_d:
                best, best_d = j, d
        assign.append(best)
    new = []
    for j in range(k):
        members = [p for p, a in zip(points, assign) if a == j]
        if members:
            new.append([sum(col) / len(members) for col in zip(*members)])
        else:
            new.append(list(centroids[j]))
    return assign, new


def kl_1d(p_pdf, q_pdf, lo, hi):
    def f(x):
        p = p_pdf(x)
        return 0.0 if p == 0 else p * math.log(p / q_pdf(x))
    return integrate.quad(f, lo, hi, limit=400)[0]
