import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from catdif.glm import GlmSpec, design_matrix, fit_glm
from catdif.glmm import (GLMM_SPECS, GlmmSpec, NonConvergence, Problem, TooLarge, fit_by_quadrature, fit_glmm,
                         icc, icc_screen, lam_from_theta, laplace_loglik, oracle_loglik, pirls)
from catdif.prep import ItemFrame
from conftest import synth_frame


class TestIcc:
    def test_values(self):
        assert icc(0.0) == 0.0
        assert icc(math.pi ** 2 / 3) == 0.5
        assert icc(3.28987) == pytest.approx(0.5, abs=1e-4)

    @given(st.floats(0, 100), st.floats(1e-6, 10))
    def test_increasing(self, t, d):
        assert icc(t) < icc(t + d) < 1

    def test_negative(self):
        with pytest.raises(ValueError):
            icc(-0.1)


def test_model_definitions():
    S = GLMM_SPECS
    assert S["EMPTY"].fixed == ("intercept",) and S["M1"].fixed == ("intercept", "g")
    assert S["M2"].fixed == S["M1"].fixed + ("n_j",) and S["M4"].fixed == S["M3"].fixed + ("n_j",)
    assert S["M3"].fixed == ("intercept", "g", "theta_K", "theta_K:g")
    assert S["M5"].random == S["M6"].random == S["M7"].random == S["M8"].random == ("intercept", "g")
    assert all(S[m].random == ("intercept",) for m in ("EMPTY", "M1", "M2", "M3", "M4"))
    assert S["M7"].fixed == S["M3"].fixed and S["M8"].fixed == S["M7"].fixed + ("n_j",)
    assert S["M6"].fixed == S["M5"].fixed + ("n_j",)
    assert S["M1"].n_cov == 1 and S["M5"].n_cov == 3


class TestReduction:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("model", ["M1", "M4", "M6", "M7"])
    def test_zero_variance_is_glm(self, seed, model):
        fr = synth_frame(seed, n_clusters=12, tau1=0.3)
        spec = GLMM_SPECS[model]
        mixed = fit_glmm(fr, spec, tau_zero=True)
        single = fit_glm(fr, GlmSpec("same", spec.fixed))
        assert np.max(np.abs(mixed.coef - single.coef)) < 1e-6
        assert mixed.deviance == pytest.approx(single.deviance, abs=1e-6)
        assert np.allclose(mixed.se, single.se, rtol=1e-6)

    def test_no_cluster_effect(self):
        fr = synth_frame(4, n_clusters=20, tau0=0.0, sizes=(40, 80))
        fit = fit_glmm(fr, "M1")
        single = fit_glm(fr, GlmSpec("ig", ("intercept", "g")))
        assert fit.tau0_sq < 0.02
        assert np.max(np.abs(fit.coef - single.coef)) < 0.02

    def test_identical_cluster_rates(self):
        j = np.repeat(np.arange(1, 7), 40)
        y = np.tile(np.r_[np.ones(30), np.zeros(10)], 6).astype(np.int8)
        z = np.zeros(len(y))
        fr = ItemFrame("X", y, (np.arange(len(y)) % 2).astype(np.int8), z, z, j)
        fit = fit_glmm(fr, "EMPTY")
        assert fit.tau0_sq < 1e-6 and fit.boundary and fit.converged
        assert fit.coef[0] == pytest.approx(logit(0.75), abs=1e-6)
        assert icc_screen({"X": fr}).rho["X"] == pytest.approx(0.0, abs=1e-6)


class TestOracle:
    def test_zero_variance_equals_glm(self):
        fr = synth_frame(1, n_clusters=6)
        X, _ = design_matrix(fr, ("intercept", "g"))
        beta = np.array([0.3, -0.2])
        eta = X @ beta
        glm_ll = float(np.sum(fr.y * eta - np.logaddexp(0, eta)))
        assert oracle_loglik(fr, "M1", beta, [0.0]) == pytest.approx(glm_ll, abs=1e-9)
        assert oracle_loglik(fr, "M5", beta, [0.0, 0.0, 0.0]) == pytest.approx(glm_ll, abs=1e-9)

    def test_trapezoid(self):
        rng = np.random.default_rng(0)
        j = np.repeat([1, 2, 3], 4)
        y = rng.integers(0, 2, 12).astype(np.int8)
        g = rng.integers(0, 2, 12).astype(np.int8)
        z = np.zeros(12)
        fr = ItemFrame("T", y, g, z, z, j)
        beta, tau = np.array([0.2, -0.5]), 0.9
        u = np.arange(-80000, 80001) * 1e-4
        total = 0.0
        for c in (1, 2, 3):
            m = j == c
            eta = beta[0] + beta[1] * g[m][:, None] + u[None, :]
            f = np.exp(np.sum(y[m][:, None] * eta - np.logaddexp(0, eta), axis=0))
            dens = np.exp(-0.5 * (u / tau) ** 2) / (tau * math.sqrt(2 * math.pi))
            total += math.log(np.trapezoid(f * dens, u))
        assert oracle_loglik(fr, "M1", beta, [tau]) == pytest.approx(total, abs=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_laplace_close_per_cluster(self, seed):
        q2 = seed % 2 == 1
        fr = synth_frame(50 + seed, n_clusters=8, tau0=0.8, tau1=0.5 if q2 else 0.0)
        model = "M5" if q2 else "M1"
        spec = GLMM_SPECS[model]
        prob = Problem(fr, spec)
        theta = np.array([0.8, -0.2, 0.5]) if q2 else np.array([0.8])
        beta = np.array([0.2, 0.3])
        lap = laplace_loglik(prob, theta, beta)
        quad = oracle_loglik(fr, model, beta, theta)
        assert abs(lap - quad) < 0.1 * prob.J

    def test_q1_eight_clusters(self):
        fr = synth_frame(9, n_clusters=8, tau0=0.7)
        fit = fit_glmm(fr, "M1")
        assert oracle_loglik(fr, "M1", fit.coef, fit.theta) == pytest.approx(fit.loglik, abs=0.05)
        beta, _, _ = fit_by_quadrature(fr, "M1", start=fit)
        assert np.max(np.abs(beta - fit.coef)) < 0.02

    def test_too_large(self):
        with pytest.raises(TooLarge):
            oracle_loglik(synth_frame(0, n_clusters=21), "M1", [0, 0], [1])
        with pytest.raises(TooLarge):
            oracle_loglik(synth_frame(0, n_clusters=11), "M5", [0, 0], [1, 0, 1])


@pytest.fixture(scope="module")
def fitted():
    fr = synth_frame(3, n_clusters=15, tau0=0.7, tau1=0.5)
    return fr, fit_glmm(fr, "M7")


class TestFit:
    def test_local_optimum(self, fitted):
        fr, fit = fitted
        prob = Problem(fr, GLMM_SPECS["M7"])
        for k in range(3):
            for d in (-1e-3, 1e-3):
                th = fit.theta.copy()
                th[k] += d
                st_ = pirls(prob, lam_from_theta(th, 2))
                assert st_.loglik <= fit.loglik + 1e-5

    def test_penalised_score_equations(self, fitted):
        fr, fit = fitted
        prob = Problem(fr, GLMM_SPECS["M7"])
        lam = lam_from_theta(fit.theta, 2)
        st_ = pirls(prob, lam)
        Zt = prob.Z @ lam
        r = prob.y - expit(prob.X @ st_.beta + np.sum(Zt * st_.v[prob.cluster], axis=1))
        assert np.max(np.abs(prob.X.T @ r)) < 1e-6
        assert np.max(np.abs(prob.csum(Zt * r[:, None]) - st_.v)) < 1e-6
        assert st_.converged

    def test_profiled_matches_cluster_newton(self, fitted):
        fr, fit = fitted
        prob = Problem(fr, GLMM_SPECS["M7"])
        assert laplace_loglik(prob, fit.theta, fit.coef) == pytest.approx(fit.loglik, abs=1e-7)

    def test_statistics(self, fitted):
        fr, fit = fitted
        assert fit.n_params == 4 + 3 and fit.n_level1 == len(fr) and fit.n_level2 == 15
        assert fit.aic == pytest.approx(fit.deviance + 14)
        assert fit.bic == pytest.approx(fit.deviance + 7 * math.log(len(fr)))
        X, _ = design_matrix(fr, GLMM_SPECS["M7"].fixed)
        var_f = np.var(X @ fit.coef)
        g = fr.g.astype(float)
        tau = fit.tau0_sq + fit.tau1_sq * np.mean(g * g) + 2 * fit.tau10 * np.mean(g)
        den = var_f + tau + math.pi ** 2 / 3
        assert fit.r2_marginal == pytest.approx(var_f / den)
        assert fit.r2_conditional == pytest.approx((var_f + tau) / den)
        assert fit.icc == pytest.approx(icc(tau))

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=15)
    def test_covariance_valid(self, seed):
        fr = synth_frame(seed, n_clusters=10, tau0=0.5, tau1=0.5)
        fit = fit_glmm(fr, "M5")
        assert fit.tau0_sq >= 0 and fit.tau1_sq >= 0
        assert abs(fit.tau10) <= math.sqrt(fit.tau0_sq * fit.tau1_sq) + 1e-12
        assert np.all(np.linalg.eigvalsh(fit.cov_re) >= -1e-12)
        assert 0 <= fit.icc < 1

    def test_budget_exhausted(self):
        with pytest.raises(NonConvergence):
            fit_glmm(synth_frame(2, tau1=0.4), "M5", max_evals=5)

    def test_deterministic(self):
        fr = synth_frame(6, n_clusters=10, tau1=0.3)
        a, b = fit_glmm(fr, "M6"), fit_glmm(fr, "M6")
        assert np.array_equal(a.coef, b.coef) and a.deviance == b.deviance

    def test_n_j_enters_raw(self):
        fr = synth_frame(7, n_clusters=10)
        fit = fit_glmm(fr, "M2")
        assert fit.names == ["intercept", "g", "n_j"]


class TestScreen:
    def test_separated_clusters(self):
        y = np.r_[np.ones(180), np.zeros(20), np.ones(20), np.zeros(180)].astype(np.int8)
        j = np.repeat([10, 30], 200)
        z = np.zeros(400)
        fr = ItemFrame("S", y, (np.arange(400) % 2).astype(np.int8), z, z, j)
        res = icc_screen({"S": fr})
        assert res.rho["S"] > 0.2
        assert res.summary["n"] == 1 and res.summary["share_above_0_2"] == 1.0

    def test_summary(self):
        frames = {f"I{k}": synth_frame(k, n_clusters=10, tau0=0.3 + 0.2 * k, item_id=f"I{k}") for k in range(5)}
        res = icc_screen(frames)
        v = np.array(list(res.rho.values()))
        assert res.summary["mean"] == pytest.approx(v.mean())
        assert res.summary["variance"] == pytest.approx(v.var(ddof=1))
        assert not res.failed
