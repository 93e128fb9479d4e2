import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixedsgld import MSGLD, SGLD, ChainSpec, Euler, GaussianConjugateModel, MinibatchScheme, generate_toy_data
from fixedsgld import toy_analytic as ta
from fixedsgld.estimators import (
    ReplicateError,
    ReplicateSummary,
    batch_means_se,
    estimate_ere,
    estimate_mse,
    fit_power_law,
    golden_section_search,
    jackknife_se,
    minimise_over_step,
    optimal_h_curve,
)


@pytest.fixture
def toy30():
    return GaussianConjugateModel(1.0, 1.0, generate_toy_data(1.0, 1.0, 30, seed=6))


class TestSummary:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40), st.floats(-50, 50))
    def test_bias_variance_decomposition(self, xs, truth):
        s = ReplicateSummary(np.array(xs), truth)
        assert s.decomposition_gap() <= 1e-9 * (1 + s.mse)

    def test_merge(self):
        a = ReplicateSummary(np.array([1.0, 2.0]), 0.5, 1, 3)
        b = ReplicateSummary(np.array([4.0]), 0.5, 0, 2)
        m = a.merge(b)
        assert m.R == 3 and m.n_diverged == 1 and m.collapses == 5
        with pytest.raises(ValueError):
            a.merge(ReplicateSummary(np.array([1.0]), 0.7))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=25))
    def test_jackknife_of_mean_is_standard_error(self, xs):
        x = np.array(xs)
        assert jackknife_se(x, np.mean) == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=1e-9, abs=1e-12)

    def test_mse_se_matches_generic_jackknife(self):
        rng = np.random.default_rng(0)
        s = ReplicateSummary(rng.normal(size=50), 0.2)
        assert s.mse_se == pytest.approx(jackknife_se((s.values - 0.2) ** 2, np.mean), rel=1e-10)


class TestReplicates:
    def test_requires_two(self, toy30):
        with pytest.raises(ReplicateError):
            estimate_mse(SGLD(), toy30, MinibatchScheme(3), ChainSpec(0.01, 10), R=1)

    def test_seed_rules(self, toy30):
        spec = ChainSpec(0.01, 10)
        with pytest.raises(ReplicateError):
            estimate_mse(SGLD(), toy30, MinibatchScheme(3), spec, R=3, seeds=[1, 2, 2])
        with pytest.raises(ReplicateError):
            estimate_mse(SGLD(), toy30, MinibatchScheme(3), spec, R=3, seeds=[1, 2])

    def test_fast_and_generic_agree_with_seeds(self, toy30):
        # explicit seeds reproduce run_chain(seed, key) on both paths
        spec = ChainSpec(0.2 / toy30.A, 200, 0.0)
        seeds = [11, 12, 13, 14]
        t = toy30.posterior_mean**2 + toy30.posterior_var
        fast = estimate_mse(SGLD(), toy30, MinibatchScheme(3), spec, 2, t, R=4, seeds=seeds)
        gen = estimate_mse(SGLD(), toy30, MinibatchScheme(3), spec, lambda x: x[0] ** 2, t, R=4, seeds=seeds)
        np.testing.assert_allclose(fast.values, gen.values, rtol=1e-11)

    def test_divergent_replicates_counted(self, toy30):
        spec = ChainSpec(2.5 / toy30.A, 3000, 1.0)
        with pytest.raises(ReplicateError):
            estimate_mse(Euler(), toy30, None, spec, R=3, stability="ignore")

    @pytest.mark.parametrize("method,kernel", [("sgld", SGLD()), ("msgld", MSGLD()), ("euler", Euler())])
    def test_mse_agrees_with_analytic(self, toy30, method, kernel):
        scheme = MinibatchScheme(3)
        h = 0.2 / toy30.A
        M = 20
        t = toy30.posterior_mean**2 + toy30.posterior_var
        s = estimate_mse(kernel, toy30, scheme if method != "euler" else None, ChainSpec(h, M, 0.0, seed=3),
                         2, t, R=20000)
        want = ta.analytic_mse2(toy30, scheme, h, M, 0.0, method)
        assert abs(s.mse - want) < 4 * s.mse_se

    def test_ere_agrees_with_analytic(self, toy30):
        scheme = MinibatchScheme(3)
        h = 0.2 / toy30.A
        s = estimate_ere(SGLD(), toy30, scheme, ChainSpec(h, 30, 0.5, seed=4), R=20000)
        want = ta.analytic_ere(toy30, scheme, h, 30, 0.5)
        assert abs(s.mean - want) < 4 * s.mean_se
        assert not s.extra["degenerate"]

    def test_ere_degenerate_flag(self, toy30):
        s = estimate_ere(SGLD(), toy30, MinibatchScheme(3), ChainSpec(0.01, 1), R=3)
        assert s.extra["degenerate"]
        np.testing.assert_allclose(s.values, -1.0)


class TestBatchMeans:
    def test_iid_batches(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        assert batch_means_se(v) == pytest.approx(v.std(ddof=1) / 2)
        assert batch_means_se(v, np.ones(4)) == pytest.approx(v.std(ddof=1) / 2)

    def test_single_batch(self):
        assert math.isnan(batch_means_se([1.0]))


class TestFits:
    def test_power_law_exact(self):
        x = np.array([1.0, 10.0, 100.0, 1000.0])
        f = fit_power_law(x, 3.0 * x**-0.5)
        assert f.exponent == pytest.approx(-0.5)
        assert f.prefactor == pytest.approx(3.0)
        assert f.r_squared == pytest.approx(1.0)

    def test_power_law_needs_points(self):
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0], [1.0, 2.0])

    def test_golden_section_parabola(self):
        x, fx, n = golden_section_search(lambda u: (u - 0.3) ** 2 + 1, -2.0, 5.0, rtol=1e-10)
        assert x == pytest.approx(0.3, abs=1e-6)
        assert fx == pytest.approx(1.0)
        assert n < 100

    def test_golden_bad_bracket(self):
        with pytest.raises(ValueError):
            golden_section_search(lambda u: u, 1.0, 1.0)

    def test_minimise_over_step_finds_interior(self):
        h, f, uni, edge, _ = minimise_over_step(lambda h: 1 / (1000 * h) + h * h, 1.0, grid=40)
        # minimum of 1/(1000 h) + h^2 at h = (1/2000)^(1/3)
        assert h == pytest.approx((1 / 2000) ** (1 / 3), rel=1e-4)
        assert uni and not edge

    def test_optimal_h_decreases_with_K(self, toy30):
        res = optimal_h_curve(toy30, MinibatchScheme(3), [100, 1000, 10000])
        hs = [r.h for r in res]
        assert hs[0] > hs[1] > hs[2]
        assert all(r.mse > 0 for r in res)
