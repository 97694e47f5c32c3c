"""End-to-end acceptance checks for the noise-benefit claims.

Every test runs a full protocol from the shipped presets with a fixed master
seed and prints one PASS/FAIL line. Run just this file with::

    pytest tests/test_acceptance.py -v -s
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from noisyem import config
from noisyem.cli import competitive_stream, kmeans_centers, sweep_spec
from noisyem.experiments import (
    run_am_probability,
    run_cnbt_experiment,
    run_competitive_sweep,
    run_kmeans_sweep,
    run_noise_sweep,
    run_sample_size_sweep,
    run_sparsity_experiment,
)
from noisyem.nem import BLIND, CHAOTIC, DIEM, LOG_CONVEX, NEM

MASTER_SEED = 20240601

# pinned thresholds
GMM_MIN_GAIN = 0.15
GMM_SIGMA = 2.5
CMM_MIN_GAIN = 0.05
CMM_BAND = (0.1, 0.5)
GAMMA_MIN_GAIN = 0.07
GMM2D_MIN_GAIN = 0.07
DIEM_MIN_GAIN = 0.15
CHAOTIC_MIN_GAIN = 0.15
BLIND_M = 225
AM_SIGMAS = 3.0
KMEANS_MIN_GAIN = 0.10
CNBT_SIGMA = 0.3
CNBT_MIN_GAIN = 0.15
UCL_MIN_GAIN = 0.10

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2} {name}: {detail}")
        return ok
    return emit


def _sweep(preset):
    return run_noise_sweep(sweep_spec(config.preset(preset), MASTER_SEED))


def _gain_line(res, row):
    base = res.baseline()
    return (f"baseline {base.mean_iters:.3f} [{base.ci_lo:.3f}, {base.ci_hi:.3f}], "
            f"sigma {row.sigma_n:g} -> {row.mean_iters:.3f} [{row.ci_lo:.3f}, {row.ci_hi:.3f}], "
            f"gain {res.reduction(row):.1%}")


def test_gmm_speedup(report):
    res = _sweep("gmm-scale")
    at = res.row(NEM, GMM_SIGMA)
    best = res.best(NEM)
    high = max(r.mean_iters for r in res.for_policy(NEM) if r.sigma_n >= 5)
    gain_ok = res.reduction(at) >= GMM_MIN_GAIN and res.ci_separated(at)
    u_ok = high > best.mean_iters
    ok = report(1, "GMM-NEM speedup", gain_ok and u_ok,
                f"{_gain_line(res, at)}; best sigma {best.sigma_n:g}; "
                f"worst mean at sigma>=5 {high:.3f}")
    assert ok


def test_cmm_speedup(report):
    res = _sweep("cmm-scale")
    near = [r for r in res.for_policy(NEM) if CMM_BAND[0] <= r.sigma_n <= CMM_BAND[1]]
    best = min(near, key=lambda r: r.mean_iters)
    ok = report(2, "CMM-NEM speedup",
                res.reduction(best) >= CMM_MIN_GAIN and res.ci_separated(best),
                _gain_line(res, best))
    assert ok


def test_censored_gamma_speedup(report):
    res = _sweep("gamma-censored")
    best = res.best(LOG_CONVEX)
    ok = report(3, "censored-gamma NEM speedup", res.reduction(best) >= GAMMA_MIN_GAIN,
                _gain_line(res, best))
    assert ok


def test_full_2d_speedup(report):
    res = _sweep("gmm-2d-full")
    best = res.best(NEM)
    ok = report(4, "2-D full-parameter GMM-NEM", res.reduction(best) >= GMM2D_MIN_GAIN,
                _gain_line(res, best))
    assert ok


def test_diem_and_chaotic(report):
    diem = _sweep("gmm-diem")
    chaos = _sweep("gmm-chaotic")
    d_best, c_best = diem.best(DIEM), chaos.best(CHAOTIC)
    ok = report(5, "DIEM and chaotic NEM",
                diem.reduction(d_best) >= DIEM_MIN_GAIN
                and chaos.reduction(c_best) >= CHAOTIC_MIN_GAIN,
                f"DIEM {_gain_line(diem, d_best)}; chaotic {_gain_line(chaos, c_best)}")
    assert ok


def test_nem_beats_blind(report):
    cfg = config.preset("nem-vs-blind")
    sizes = [m for m in cfg.ints("sample_sizes") if m >= BLIND_M]
    res = run_sample_size_sweep(sweep_spec(cfg, MASTER_SEED), sizes)
    worse = []
    for m in sizes:
        for nem_row in res.for_policy(NEM, m):
            blind_row = res.row(BLIND, nem_row.sigma_n, m)
            if nem_row.mean_iters > blind_row.mean_iters:
                worse.append((m, nem_row.sigma_n, nem_row.mean_iters, blind_row.mean_iters))
    blind_helps = [r.sigma_n for r in res.for_policy(BLIND, BLIND_M) if res.ci_separated(r)]
    ok = report(6, "NEM versus blind noise", not worse and not blind_helps,
                f"sizes {sizes}; cells where NEM is slower {worse}; "
                f"blind CI-separated at M={BLIND_M}: {blind_helps}")
    assert ok


def test_am_probability_monotone(report):
    cfg = config.preset("amprob")
    tab = run_am_probability(cfg.model(), range(1, 61), cfg.vector("grid"),
                             cfg.integer("mc_samples"), MASTER_SEED)
    p, se = tab.prob, tab.std_error
    slack_m = AM_SIGMAS * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    slack_s = AM_SIGMAS * np.sqrt(se[:, 1:] ** 2 + se[:, :-1] ** 2)
    rise_m = np.diff(p, axis=0) - slack_m
    rise_s = np.diff(p, axis=1) - slack_s
    ok = report(7, "A_M occupation probability", rise_m.max() <= 0 and rise_s.max() <= 0,
                f"P(M=1, 0.1)={p[0, 0]:.4f}, P(M=60, 1.0)={p[-1, -1]:.5f}; "
                f"largest excess rise over 3 s.e.: in M {rise_m.max():.2e}, "
                f"in sigma {rise_s.max():.2e}")
    assert ok


def test_sparsity(report):
    cfg = config.preset("sparsity")
    sizes = cfg.ints("sample_sizes")
    tab = run_sparsity_experiment(cfg.model(), cfg.init(), sizes, cfg.vector("grid"),
                                  cfg.integer("trials"), MASTER_SEED, cfg.frozen(), cfg.stop(),
                                  cfg.policy().kind)
    dips = {m: tab.dip(i) for i, m in enumerate(sizes)}
    ok = report(8, "sparsity effect", dips[max(sizes)] > dips[min(sizes)],
                "dips " + ", ".join(f"M={m}: {d:.5f}" for m, d in dips.items()))
    assert ok


def test_kmeans_speedup(report):
    cfg = config.preset("kmeans")
    res = run_kmeans_sweep(kmeans_centers(cfg), cfg.number("spread"), cfg.integer("samples"),
                           cfg.vector("grid"), cfg.integer("trials"), MASTER_SEED,
                           tuple(p.kind for p in cfg.policies()), cfg.stop(),
                           cfg.get("assign_on", "noisy"))
    best = res.best(BLIND)
    ok = report(9, "k-means noise benefit", res.reduction(best) >= KMEANS_MIN_GAIN,
                _gain_line(res, best))
    assert ok


def test_cnbt(report):
    cfg = config.preset("cnbt")
    res = run_cnbt_experiment(cfg.model(), cfg.init(), cfg.integer("samples"), cfg.vector("grid"),
                              cfg.integer("trials"), MASTER_SEED, cfg.policy().kind, cfg.stop(),
                              cfg.frozen())
    base = res.baseline.mean_rate
    at = next(r for r in res.rows if np.isclose(r.sigma_n, CNBT_SIGMA))
    best = res.best()
    last = res.rows[-1]
    gain = 1 - at.mean_rate / base
    ok = report(10, "CNBT misclassification", gain >= CNBT_MIN_GAIN and last.mean_rate > best.mean_rate,
                f"noiseless {base:.4f}, sigma {CNBT_SIGMA:g} -> {at.mean_rate:.4f} "
                f"(gain {gain:.1%}), minimum {best.mean_rate:.4f} at sigma {best.sigma_n:g}, "
                f"sigma {last.sigma_n:g} -> {last.mean_rate:.4f}")
    assert ok


def test_noisy_ucl(report):
    cfg = config.preset("ucl")
    res = run_competitive_sweep(cfg.get("mode", "ucl"), competitive_stream(cfg), cfg.vector("grid"),
                                cfg.integer("trials"), cfg.integer("steps"), MASTER_SEED,
                                cfg.get("schedule", "variance"))
    best = res.best(BLIND)
    ok = report(11, "noisy UCL", res.reduction(best) >= UCL_MIN_GAIN, _gain_line(res, best))
    assert ok


PROPERTY_SUITES = {
    "EM ascent": ["tests/test_em.py::TestAscent"],
    "NEM-set invariants": [
        "tests/test_noise.py::TestNemBox::test_contains_zero",
        "tests/test_noise.py::TestNemBox::test_contraction_closed",
        "tests/test_noise.py::TestNemBox::test_dominance_inside",
        "tests/test_noise.py::TestNemBox::test_dominance_fails_outside",
        "tests/test_noise.py::TestNemBox::test_brute_force_interval",
    ],
    "k-means equals hard EM": ["tests/test_clustering.py::TestKmeans::test_equivalent_to_hard_em"],
    "zero-noise NEM equals EM": ["tests/test_nem.py::TestZeroNoiseIdentity"],
    "responsibilities": ["tests/test_mixtures.py::TestResponsibilities::test_normalized"],
    "truncated-normal moments": [
        "tests/test_noise.py::TestTruncatedNormal::test_half_normal_moments",
        "tests/test_noise.py::TestTruncatedNormal::test_inverse_cdf_path_moments",
    ],
    "CMM gradient": [
        "tests/test_em.py::TestCmm::test_gradient_matches_finite_differences",
        "tests/test_em.py::TestCmm::test_gradient_property",
    ],
}


def test_property_suites(report):
    root = Path(__file__).resolve().parent.parent
    failed = []
    for name, nodes in PROPERTY_SUITES.items():
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
             "--hypothesis-seed=0", *nodes],
            cwd=root, capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            failed.append(name)
    ok = report(12, "property suites", not failed,
                f"{len(PROPERTY_SUITES) - len(failed)}/{len(PROPERTY_SUITES)} suites green"
                + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
