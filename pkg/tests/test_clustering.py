import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noisyem.clustering import (
    Centroids,
    CompetitiveState,
    StreamSpec,
    classify_all,
    competitive_noise_std,
    competitive_step,
    hard_responsibilities,
    kmeans_objective,
    kmeans_update,
    misclassification_rate,
    naive_bayes_classify,
    nearest,
    rotated_square,
    run_noisy_competitive,
    run_noisy_kmeans,
    settle_time,
)
from noisyem.em import StopRule, gmm_em_update
from noisyem.errors import InputError, ScheduleExhaustedError
from noisyem.mixtures import Dataset, GmmParams, responsibility_matrix, sample_dataset
from noisyem.nem import BLIND, DIEM, NEM, NoisePolicy

from . import oracles


@st.composite
def kmeans_instance(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    d = int(rng.integers(1, 4))
    m = int(rng.integers(k, 201))
    y = rng.normal(0, 3, (m, d))
    return y, y[rng.choice(m, k, replace=False)].copy()


class TestKmeans:
    def test_fixed_point(self):
        pts = np.array([[0.0, 0.0], [5.0, 1.0], [-2.0, 4.0]])
        out = kmeans_update(Dataset(pts), Centroids(pts.copy()))
        np.testing.assert_array_equal(out.points, pts)
        np.testing.assert_array_equal(out.assignments, [0, 1, 2])

    def test_unit_square(self):
        sq = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        out = kmeans_update(Dataset(sq), Centroids([[0.0, 0.5], [1.0, 0.5]]))
        np.testing.assert_array_equal(out.points, [[0.0, 0.5], [1.0, 0.5]])

    def test_tie_goes_to_lowest_index(self):
        assert nearest(np.array([[0.0]]), np.array([[-1.0], [1.0]]))[0] == 0

    def test_empty_cluster_keeps_centroid(self):
        y = np.array([[0.0], [0.1], [0.2]])
        out = kmeans_update(Dataset(y), Centroids([[0.0], [100.0]]))
        assert out.points[1, 0] == 100.0

    def test_too_many_centroids(self):
        with pytest.raises(InputError):
            kmeans_update(Dataset(np.zeros((2, 1))), Centroids(np.zeros((3, 1))))

    @given(kmeans_instance())
    def test_matches_loop_oracle(self, inst):
        y, c = inst
        out = kmeans_update(Dataset(y), Centroids(c))
        assign, new = oracles.kmeans_step(y.tolist(), c.tolist())
        np.testing.assert_array_equal(out.assignments, assign)
        np.testing.assert_allclose(out.points, new, rtol=1e-12, atol=1e-12)

    @given(kmeans_instance())
    def test_objective_non_increasing(self, inst):
        y, c = inst
        data = Dataset(y)
        cur = Centroids(c)
        prev = kmeans_objective(y, cur.points)
        for _ in range(5):
            cur = kmeans_update(data, cur)
            now = kmeans_objective(y, cur.points)
            assert now <= prev + 1e-9 * max(1.0, prev)
            prev = now

    def test_equivalent_to_hard_em(self):
        # hard memberships, frozen weights and spreads: the EM mean step is the k-means step
        rng = np.random.default_rng(2024)
        for _ in range(100):
            k = int(rng.integers(1, 5))
            d = int(rng.integers(1, 4))
            m = int(rng.integers(k, 201))
            y = rng.normal(0, 3, (m, d))
            cent = Centroids(y[rng.choice(m, k, replace=False)].copy())
            model = GmmParams(np.full(k, 1.0 / k), cent.points, np.ones((k, d)))
            data = Dataset(y)
            for _ in range(10):
                resp = hard_responsibilities(y, model.means)
                if np.any(resp.sum(axis=0) == 0):
                    # EM cannot update an empty component; k-means keeps it in place
                    cent = kmeans_update(data, cent)
                    model = model.replace(means=cent.points)
                    continue
                model = gmm_em_update(data, model, frozen={"weights", "scales"}, resp=resp)
                cent = kmeans_update(data, cent)
                np.testing.assert_array_equal(model.means, cent.points)


class TestNoisyKmeans:
    centers = 1.5 * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]])

    def data(self, m=300, seed=0):
        truth = GmmParams.from_stds(np.full(4, 0.25), self.centers, np.ones((4, 3)))
        return sample_dataset(truth, m, seed)

    def test_zero_noise_is_plain_kmeans(self):
        data = self.data()
        trace = run_noisy_kmeans(data, 4, NoisePolicy(BLIND, sigma0=0.0), StopRule(4, 200), seed=1)
        cur = Centroids(data.samples[:4].copy())
        for snap in trace.iterates[1:]:
            cur = kmeans_update(data, cur)
            np.testing.assert_array_equal(snap, cur.points)
        assert trace.converged

    def test_deterministic(self):
        data = self.data()
        pol = NoisePolicy(BLIND, sigma0=0.45)
        a = run_noisy_kmeans(data, 4, pol, StopRule(4, 200), seed=3)
        b = run_noisy_kmeans(data, 4, pol, StopRule(4, 200), seed=3)
        assert a.converged_at == b.converged_at
        np.testing.assert_array_equal(a.final, b.final)

    def test_screened_noise_runs(self):
        trace = run_noisy_kmeans(self.data(), 4, NoisePolicy(NEM, sigma0=0.45), StopRule(4, 200), seed=4)
        assert trace.converged

    def test_rejects_unsupported_noise(self):
        with pytest.raises(InputError):
            run_noisy_kmeans(self.data(), 4, NoisePolicy(DIEM, s_n=0.5))

    def test_assign_on_validated(self):
        with pytest.raises(InputError):
            run_noisy_kmeans(self.data(), 4, assign_on="both")

    def test_objective_recorded(self):
        data = self.data()
        trace = run_noisy_kmeans(data, 4, NoisePolicy(), StopRule(4, 200))
        assert trace.logliks[-1] == pytest.approx(-kmeans_objective(data.samples, trace.final))


class TestNaiveBayes:
    model = GmmParams.from_stds([0.5, 0.5], [[-5.0], [5.0]], [[1.0], [1.0]])

    def test_at_first_mean(self):
        assert naive_bayes_classify(self.model, [-5.0]) == 0

    def test_symmetric_tie(self):
        m = GmmParams.from_stds([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
        assert naive_bayes_classify(m, [0.0]) == 0

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=30), st.integers(0, 1000))
    def test_matches_argmax(self, ys, seed):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0.1, 1, 3)
        m = GmmParams.from_stds(raw / raw.sum(), rng.normal(0, 5, (3, 1)), rng.uniform(0.5, 3, (3, 1)))
        y = np.array(ys)[:, None]
        r = responsibility_matrix(m, y)
        np.testing.assert_array_equal(classify_all(m, y), [int(np.argmax(row)) for row in r])

    def test_same_model_zero_rate(self):
        data = sample_dataset(self.model, 100, 0)
        assert misclassification_rate(self.model, self.model, data) == 0.0

    def test_permuted_model_rate_one(self):
        perm = GmmParams.from_stds([0.5, 0.5], [[5.0], [-5.0]], [[1.0], [1.0]])
        data = sample_dataset(self.model, 200, 1)
        assert misclassification_rate(self.model, perm, data) == 1.0

    def test_component_count_must_match(self):
        data = sample_dataset(self.model, 10, 1)
        with pytest.raises(InputError):
            misclassification_rate(self.model, GmmParams([1.0], [[0.0]], [[1.0]]), data)

    @given(st.integers(0, 10_000))
    def test_rate_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        other = GmmParams.from_stds([0.5, 0.5], rng.normal(0, 5, (2, 1)), rng.uniform(0.5, 3, (2, 1)))
        data = sample_dataset(self.model, 50, seed)
        assert 0.0 <= misclassification_rate(self.model, other, data) <= 1.0


class TestCompetitive:
    def state(self, rate_t=0):
        return CompetitiveState(np.array([[0.0, 0.0], [10.0, 10.0]]), t=rate_t, c0=0.3, horizon=1500)

    def test_rate_schedule(self):
        s = self.state()
        assert s.rate == pytest.approx(0.3)
        assert CompetitiveState(s.weights, t=750).rate == pytest.approx(0.15)

    def test_zero_rate_unchanged(self):
        s = self.state()
        out = competitive_step("ucl", s, [1.0, 2.0], rate=0.0)
        np.testing.assert_array_equal(out.weights, s.weights)

    def test_full_step_jumps(self):
        out = competitive_step("ucl", self.state(), [1.0, 2.0], rate=1.0)
        np.testing.assert_array_equal(out.weights[0], [1.0, 2.0])
        np.testing.assert_array_equal(out.weights[1], [10.0, 10.0])
        assert out.t == 1

    def test_negative_rate_raises(self):
        s = CompetitiveState(np.zeros((2, 2)), t=1501)
        with pytest.raises(ScheduleExhaustedError):
            competitive_step("ucl", s, [1.0, 1.0])

    def test_scl_needs_label(self):
        with pytest.raises(InputError):
            competitive_step("scl", self.state(), [1.0, 1.0])

    def test_dcl_needs_previous(self):
        with pytest.raises(InputError):
            competitive_step("dcl", self.state(), [1.0, 1.0])

    def test_unknown_mode(self):
        with pytest.raises(InputError):
            competitive_step("art", self.state(), [1.0, 1.0])

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.01, 0.9))
    def test_scl_wrong_class_moves_away(self, z, c):
        s = self.state()
        z = np.array(z)
        assert np.argmin(((s.weights - z) ** 2).sum(axis=1)) == 0
        before = s.weights[0].copy()
        out = competitive_step("scl", s, z, label=1, rate=c)
        assert np.linalg.norm(out.weights[0] - z) >= np.linalg.norm(before - z)
        right = competitive_step("scl", s, z, label=0, rate=c)
        assert np.linalg.norm(right.weights[0] - z) <= np.linalg.norm(before - z)

    def test_dcl_sign(self):
        s = self.state()
        up = competitive_step("dcl", s, [1.0, 1.0], prev=[0.0, 0.0], rate=0.5)
        down = competitive_step("dcl", s, [1.0, 1.0], prev=[2.0, 0.0], rate=0.5)
        np.testing.assert_allclose(up.weights[0], [0.5, 0.5])
        np.testing.assert_allclose(down.weights[0], [-0.5, -0.5])

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(30, 100))
    def test_far_losers_do_not_change_winner(self, z, far):
        s = self.state()
        base = competitive_step("ucl", s, z, rate=0.3)
        extra = CompetitiveState(np.vstack([s.weights, [[far, -far]]]))
        more = competitive_step("ucl", extra, z, rate=0.3)
        np.testing.assert_array_equal(more.weights[:2], base.weights)

    def test_rotated_square(self):
        sq = rotated_square(24.0)
        d = np.linalg.norm(sq[:, None] - sq[None], axis=2)
        assert sorted(np.round(d[0], 9))[1] == pytest.approx(24.0)
        np.testing.assert_allclose(sq.mean(axis=0), 0.0, atol=1e-12)

    def test_settle_time(self):
        h = np.array([[[10.0]], [[5.0]], [[1.2]], [[0.9]], [[1.0]]])
        assert settle_time(h, 0.25) == 2

    def test_noise_schedules(self):
        p = NoisePolicy(BLIND, sigma0=64.0)
        assert competitive_noise_std(p, 2, "variance") == pytest.approx(4.0)
        assert competitive_noise_std(p, 2, "std") == pytest.approx(16.0)
        with pytest.raises(InputError):
            competitive_noise_std(p, 2, "log")

    @pytest.mark.parametrize("mode", ["ucl", "scl", "dcl"])
    def test_zero_noise_matches_plain_steps(self, mode):
        stream = StreamSpec(rotated_square(24.0), 2.0)
        trace = run_noisy_competitive(mode, stream, NoisePolicy(BLIND, sigma0=0.0), 60, seed=5)
        y, labels = stream.draw(60, np.random.default_rng(5))
        state = CompetitiveState(y[:4].copy(), c0=0.3, horizon=60)
        prev = None
        for t in range(60):
            if mode != "dcl" or prev is not None:
                state = competitive_step(mode, state, y[t], label=labels[t], prev=prev)
            else:
                state = CompetitiveState(state.weights, state.t + 1, state.c0, state.horizon)
            prev = y[t]
            np.testing.assert_allclose(trace.iterates[t + 1], state.weights, rtol=1e-12, atol=1e-12)

    def test_deterministic(self):
        stream = StreamSpec(rotated_square(24.0), 2.0)
        pol = NoisePolicy(BLIND, sigma0=16.0)
        a = run_noisy_competitive("ucl", stream, pol, 300, seed=8)
        b = run_noisy_competitive("ucl", stream, pol, 300, seed=8)
        assert a.converged_at == b.converged_at
        np.testing.assert_array_equal(a.final, b.final)

    def test_needs_k_steps(self):
        with pytest.raises(InputError):
            run_noisy_competitive("ucl", StreamSpec(rotated_square(), 2.0), steps=3)


def test_cnbt_nem_not_worse_than_em():
    from noisyem import config
    from noisyem.experiments import run_cnbt_experiment

    cfg = config.preset("cnbt")
    res = run_cnbt_experiment(cfg.model(), cfg.init(), 300, [1.0], 60, seed=21)
    em, nem = (np.array(r.values) for r in res.rows)
    assert em.size == nem.size == 60
    diff = nem - em
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    assert diff.mean() <= 3 * se
