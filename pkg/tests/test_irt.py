import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from catdif.irt import (Item, IrtConfig, ResponseVector, estimate_eap, estimate_mle, fisher_information,
                        log_likelihood, prob_correct, score, test_information as total_information)

CFG = IrtConfig()

items_st = st.builds(
    lambda i, a, b, c: Item(f"I{i}", a, b, c),
    st.integers(0, 10 ** 6),
    st.floats(0.3, 2.5), st.floats(-3, 3), st.floats(0, 0.4),
)


def random_vector(rng, n, c_max=0.3):
    items = [Item(f"I{k}", rng.uniform(0.5, 2.0), rng.uniform(-2, 2), rng.uniform(0, c_max)) for k in range(n)]
    return ResponseVector.from_items(items, rng.integers(0, 2, n).tolist()), items


class TestProbability:
    def test_at_difficulty(self):
        assert prob_correct(0.7, Item("x", 1.3, 0.7, 0.2)) == pytest.approx(0.6, abs=1e-12)

    def test_published_item_at_its_difficulty(self):
        it = Item("MP62171", 0.832, -0.145, 0.128)
        assert prob_correct(-0.145, it) == pytest.approx(0.564, abs=1e-12)

    def test_saturation(self):
        assert prob_correct(40.0, Item("x", 1.0, 0.0, 0.0)) == pytest.approx(1.0, abs=1e-12)

    def test_extreme_arguments_stay_finite(self):
        it = Item("x", 1.0, 0.0, 0.1)
        assert prob_correct(-700, it) == pytest.approx(0.1)
        assert prob_correct(700, it) == pytest.approx(1.0)

    @given(items_st, st.floats(-6, 6), st.floats(0.001, 3))
    def test_increasing_and_bounded(self, it, theta, dt):
        p1, p2 = prob_correct(theta, it), prob_correct(theta + dt, it)
        assert it.c < p1 < 1 or (p1 == 1.0 and theta - it.b > 20)
        assert p2 >= p1

    def test_item_validation(self):
        with pytest.raises(ValueError):
            Item("x", 0.0, 0.0)
        with pytest.raises(ValueError):
            Item("x", 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            Item("x", 1.0, math.inf)


class TestLikelihood:
    def test_empty_is_zero(self):
        assert log_likelihood(0.3, ResponseVector()) == 0.0

    def test_single_item(self):
        rv = ResponseVector.from_items([Item("x", 1, 0, 0)], [1])
        assert log_likelihood(0.0, rv) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_matches_direct_product(self):
        rng = np.random.default_rng(3)
        rv, items = random_vector(rng, 5)
        theta = 0.37
        direct = 1.0
        for it, x in zip(items, rv.x):
            p = prob_correct(theta, it)
            direct *= p if x == 1 else 1 - p
        assert math.exp(log_likelihood(theta, rv)) == pytest.approx(direct, rel=1e-12, abs=1e-12)

    @given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(1, 6), st.floats(-4, 4))
    def test_additive_over_disjoint_vectors(self, seed, n1, n2, theta):
        rng = np.random.default_rng(seed)
        rv, _ = random_vector(rng, n1 + n2)
        A = ResponseVector(rv.ids[:n1], rv.a[:n1], rv.b[:n1], rv.c[:n1], rv.x[:n1])
        B = ResponseVector(rv.ids[n1:], rv.a[n1:], rv.b[n1:], rv.c[n1:], rv.x[n1:])
        assert log_likelihood(theta, A.concat(B)) == pytest.approx(
            log_likelihood(theta, A) + log_likelihood(theta, B), abs=1e-10)

    def test_score_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(100):
            rv, _ = random_vector(rng, int(rng.integers(1, 12)))
            theta = rng.uniform(-3, 3)
            fd = (log_likelihood(theta + h, rv) - log_likelihood(theta - h, rv)) / (2 * h)
            s = score(theta, rv)
            assert abs(s - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_rejects_bad_vectors(self):
        it = Item("x", 1, 0)
        with pytest.raises(ValueError):
            ResponseVector.from_items([it], [2])
        with pytest.raises(ValueError):
            ResponseVector.from_items([it, it], [0, 1])


class TestInformation:
    def test_quarter_at_difficulty(self):
        assert fisher_information(0.4, Item("x", 1, 0.4, 0)) == pytest.approx(0.25, abs=1e-12)

    def test_discrimination_scaling(self):
        i1 = fisher_information(0.0, Item("x", 0.8, 0.0, 0))
        i2 = fisher_information(0.0, Item("x", 1.6, 0.0, 0))
        assert i2 == pytest.approx(4 * i1, rel=1e-12)

    @pytest.mark.parametrize("c,theta", [(0.5, 0.0), (0.2, 1.3), (0.0, -2.0)])
    def test_matches_expected_curvature(self, c, theta):
        # expected information = -E[d2 log f / d theta2], by central differences
        it = Item("x", 1.2, 0.0, c)
        p = prob_correct(theta, it)
        h = 1e-4

        def ll(t, x):
            q = prob_correct(t, it)
            return math.log(q) if x else math.log(1 - q)

        curv = sum(w * (ll(theta + h, x) - 2 * ll(theta, x) + ll(theta - h, x)) / h ** 2
                   for x, w in ((1, p), (0, 1 - p)))
        assert fisher_information(theta, it) == pytest.approx(-curv, abs=1e-6)

    def test_test_information_is_additive(self):
        rng = np.random.default_rng(5)
        _, items = random_vector(rng, 7)
        total = total_information(0.3, items)
        assert total == pytest.approx(sum(fisher_information(0.3, it) for it in items), rel=1e-12)
        assert total_information(0.0, []) == 0.0


class TestMLE:
    def test_symmetric_pattern(self):
        it = [Item("a", 1, 0, 0), Item("b", 1, 0, 0)]
        res = estimate_mle(ResponseVector.from_items(it, [1, 0]))
        assert res.theta == pytest.approx(0.0, abs=1e-8)
        assert res.converged

    @pytest.mark.parametrize("x,bound", [(1, 4.0), (0, -4.0)])
    def test_extreme_patterns_hit_bounds(self, x, bound):
        res = estimate_mle(ResponseVector.from_items([Item("a", 1, 0, 0)], [x]))
        assert res.theta == bound and not res.converged

    def test_requires_responses(self):
        with pytest.raises(ValueError):
            estimate_mle(ResponseVector())

    def test_grid_search_oracle(self):
        rng = np.random.default_rng(21)
        grid = np.arange(-40000, 40001) * 1e-4
        checked = 0
        for _ in range(30):
            rv, _ = random_vector(rng, 10)
            res = estimate_mle(rv)
            ll = np.array([log_likelihood(t, rv) for t in grid[::10]])
            coarse = grid[::10][np.argmax(ll)]
            fine = grid[(grid > coarse - 0.002) & (grid < coarse + 0.002)]
            best = fine[np.argmax([log_likelihood(t, rv) for t in fine])]
            if res.converged:
                assert res.theta == pytest.approx(best, abs=5e-4)
                checked += 1
        assert checked >= 10

    @given(st.integers(0, 10 ** 6), st.integers(3, 15))
    def test_interior_solutions(self, seed, n):
        rng = np.random.default_rng(seed)
        rv, _ = random_vector(rng, n)
        res = estimate_mle(rv)
        if res.converged:
            assert -4 < res.theta < 4
            assert abs(score(res.theta, rv)) < 1e-6
            for start in (-2.0, 2.0):
                assert estimate_mle(rv, start=start).theta == pytest.approx(res.theta, abs=1e-6)

    def test_se_from_information(self):
        rng = np.random.default_rng(2)
        rv, items = random_vector(rng, 12)
        res = estimate_mle(rv)
        assert res.se == pytest.approx(1 / math.sqrt(total_information(res.theta, items)), rel=1e-9)

    def test_agrees_with_generic_optimizer(self):
        rng = np.random.default_rng(8)
        rv, _ = random_vector(rng, 20)
        res = estimate_mle(rv)
        opt = optimize.minimize_scalar(lambda t: -log_likelihood(t, rv), bounds=(-4, 4), method="bounded",
                                       options=dict(xatol=1e-10))
        if res.converged:
            assert res.theta == pytest.approx(opt.x, abs=1e-5)


class TestEAP:
    def test_prior_mean_for_empty(self):
        assert estimate_eap(ResponseVector()).theta == pytest.approx(0.0, abs=1e-6)

    def test_symmetric_posterior(self):
        it = [Item("a", 1, 0, 0), Item("b", 1, 0, 0)]
        assert estimate_eap(ResponseVector.from_items(it, [1, 0])).theta == pytest.approx(0.0, abs=1e-6)

    def test_fine_grid_oracle(self):
        rng = np.random.default_rng(4)
        rv, _ = random_vector(rng, 5)
        fine = np.linspace(-4, 4, 20001)
        lp = np.array([log_likelihood(t, rv) for t in fine]) - 0.5 * fine ** 2
        w = np.exp(lp - lp.max())
        mean = np.trapezoid(w * fine, fine) / np.trapezoid(w, fine)
        assert estimate_eap(rv).theta == pytest.approx(mean, abs=1e-3)

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            estimate_eap(ResponseVector(), prior_sd=0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IrtConfig(theta_min=1, theta_max=0)
        with pytest.raises(ValueError):
            IrtConfig(quad_points=1)
        assert len(IrtConfig().grid) == 81
