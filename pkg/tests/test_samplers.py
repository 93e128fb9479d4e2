import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixedsgld import (
    MSGLD,
    RWM,
    SGLD,
    ChainSpec,
    DivergenceError,
    Euler,
    GaussianConjugateModel,
    MinibatchScheme,
    OuProcess,
    RunningStats,
    euler_step,
    generate_toy_data,
    msgld_step,
    run_chain,
    run_linear_chain,
    rwm_step,
    sgld_step,
)
from fixedsgld import toy_analytic as ta
from fixedsgld.rng import generator
from fixedsgld.samplers import (
    Chain,
    StabilityWarning,
    StepSizeError,
    is_collapsed,
    make_kernel,
    metropolis_accept,
    noise_multiplier,
    run_linear_replicates,
    write_trace_csv,
)


@pytest.fixture
def toy20():
    return GaussianConjugateModel(1.0, 1.0, generate_toy_data(1.0, 1.0, 20, seed=2))


class TestSteps:
    def test_euler_by_hand(self, small_toy):
        t, h, xi = 0.3, 0.01, 0.7
        g = -2 * small_toy.A * t + 2 * small_toy.offsets.sum()
        out = euler_step(small_toy, t, h, xi)
        assert out[0] == pytest.approx(t + 0.5 * h * g + math.sqrt(h) * xi, rel=1e-14)

    def test_sgld_by_hand(self):
        out = sgld_step(np.array([2.0]), np.array([1.0]), 0.04, np.array([0.5]))
        assert out[0] == pytest.approx(1.0 + 0.04 * 2.0 + 0.2 * 0.5)

    def test_msgld_by_hand(self):
        out, collapsed = msgld_step(np.array([1.0]), np.array([[10.0]]), np.array([0.0]), 0.1, np.array([1.0]))
        assert out[0] == pytest.approx(0.1 + math.sqrt(0.1) * (1 - 0.05 * 10.0))
        assert not collapsed

    def test_msgld_collapse_flag(self):
        _, collapsed = msgld_step(np.zeros(1), np.array([[30.0]]), np.zeros(1), 0.1, np.ones(1))
        assert collapsed
        assert is_collapsed(noise_multiplier(np.diag([1.0, 25.0]), 0.1))
        assert not is_collapsed(noise_multiplier(np.diag([1.0, 2.0]), 0.1))

    def test_divergence_raises(self):
        with pytest.raises(DivergenceError) as e:
            sgld_step(np.array([np.inf]), np.zeros(1), 0.1, np.zeros(1), step=17)
        assert e.value.step == 17

    def test_metropolis_rule(self):
        assert metropolis_accept(0.5, 0.999)
        assert metropolis_accept(math.log(0.3), 0.29)
        assert not metropolis_accept(math.log(0.3), 0.31)

    def test_rwm_from_mode_accepts_with_density_ratio(self):
        # from the mode every proposal lowers the density, so the acceptance
        # probability is the density ratio: E exp(-(s xi)^2 / 2) = 1 / sqrt(1 + s^2)
        ou = OuProcess(0.0, 1.0)
        rng = generator(1)
        T = 4000
        n_acc = sum(rwm_step(ou, [0.0], 0.8, rng)[2] for _ in range(T))
        assert n_acc / T == pytest.approx(1 / math.sqrt(1.64), abs=0.03)

    def test_rwm_bad_scale(self):
        with pytest.raises(ValueError):
            rwm_step(OuProcess(), [0.0], 0.0, generator(1))

    def test_make_kernel(self):
        assert isinstance(make_kernel("SGLD"), SGLD)
        assert make_kernel("msgld", cov_source="estimated").cov_source == "estimated"
        with pytest.raises(ValueError):
            make_kernel("hmc")
        with pytest.raises(ValueError):
            MSGLD(cov_of="hessian")
        assert MSGLD(cov_of="gradient").cov_factor == 4.0


class TestRunningStats:
    def test_moments(self):
        s = RunningStats(2)
        xs = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        s.push_block(xs)
        np.testing.assert_allclose(s.mean(), xs.mean(axis=0))
        np.testing.assert_allclose(s.moment(3), (xs**3).mean(axis=0))
        np.testing.assert_allclose(s.variance(), xs.var(axis=0))

    def test_functions(self):
        s = RunningStats(1, functions={"sq": lambda x: x[0] ** 2})
        s.push_block([1.0, 2.0, 3.0])
        assert s.average("sq") == pytest.approx(14 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            RunningStats(1).mean()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.integers(0, 30))
    def test_merge_equals_concatenation(self, xs, cut):
        cut = min(cut, len(xs))
        a, b, whole = RunningStats(1, cross=True), RunningStats(1, cross=True), RunningStats(1, cross=True)
        a.push_block(xs[:cut])
        b.push_block(xs[cut:])
        whole.push_block(xs)
        m = a.merge(b)
        assert m.count == whole.count
        np.testing.assert_allclose(m.power_sums, whole.power_sums, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(m.cross_sum, whole.cross_sum, rtol=1e-12, atol=1e-9)

    def test_merge_shape_mismatch(self):
        with pytest.raises(ValueError):
            RunningStats(1).merge(RunningStats(2))


class TestChain:
    def test_spec_validation(self):
        with pytest.raises(StepSizeError):
            ChainSpec(0.0, 10)
        with pytest.raises(ValueError):
            ChainSpec(0.1, 10, burn_in=10)

    def test_full_batch_sgld_equals_euler(self, toy20):
        spec = ChainSpec(0.01, 500, 0.0, seed=4)
        e = run_chain(Euler(), toy20, None, spec, thin=1)
        s = run_chain(SGLD(), toy20, MinibatchScheme.full(20), spec, thin=1)
        assert np.array_equal(e.trace, s.trace)

    def test_full_batch_sgld_equals_euler_logistic(self, small_logistic):
        spec = ChainSpec(0.002, 300, np.zeros(3), seed=9)
        e = run_chain(Euler(), small_logistic, None, spec, thin=1)
        s = run_chain(SGLD(), small_logistic, MinibatchScheme.full(small_logistic.N), spec, thin=1)
        assert np.array_equal(e.trace, s.trace)

    def test_resume_matches_single_run(self, toy20):
        c1 = Chain(MSGLD("estimated"), toy20, MinibatchScheme(4), 0.0, 0.01, seed=3, key=(1,))
        c2 = Chain(MSGLD("estimated"), toy20, MinibatchScheme(4), 0.0, 0.01, seed=3, key=(1,))
        c1.advance(5000)
        c2.advance(1234)
        c2.advance(5000 - 1234)
        assert np.array_equal(c1.theta, c2.theta)

    def test_seed_determinism(self, toy20):
        spec = ChainSpec(0.01, 300, 0.0, seed=12)
        a = run_chain(SGLD(), toy20, MinibatchScheme(3), spec, key=(2,))
        b = run_chain(SGLD(), toy20, MinibatchScheme(3), spec, key=(2,))
        c = run_chain(SGLD(), toy20, MinibatchScheme(3), spec, key=(3,))
        assert np.array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, c.theta)

    def test_stability_policies(self, toy20):
        h = 1.5 / toy20.A
        with pytest.warns(StabilityWarning):
            Chain(SGLD(), toy20, MinibatchScheme(2), 0.0, h)
        with pytest.raises(StepSizeError):
            Chain(SGLD(), toy20, MinibatchScheme(2), 0.0, h, stability="error")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            Chain(SGLD(), toy20, MinibatchScheme(2), 0.0, h, stability="ignore")

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_in_chain(self, toy20):
        spec = ChainSpec(2.5 / toy20.A, 5000, 1.0, seed=1)
        with pytest.raises(DivergenceError):
            run_chain(Euler(), toy20, None, spec, stability="ignore")

    def test_estimated_cov_needs_two(self, toy20):
        with pytest.raises(ValueError):
            Chain(MSGLD("estimated"), toy20, MinibatchScheme(1), 0.0, 0.01)

    def test_rwm_acceptance_counted(self):
        res = run_chain(RWM(1.0), OuProcess(), None, ChainSpec(1.0, 2000, 0.0, seed=5))
        assert 0.5 < res.acceptance_rate < 0.9

    def test_trace_csv(self, tmp_path, toy20):
        res = run_chain(SGLD(), toy20, MinibatchScheme(2), ChainSpec(0.01, 10, 0.0), thin=2)
        write_trace_csv(tmp_path / "t.csv", res.trace)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,theta1" and len(lines) == 6


class TestCompiledPath:
    @pytest.mark.parametrize("kernel,mode", [
        (SGLD(), "without"), (SGLD(), "with"),
        (MSGLD(), "without"), (MSGLD("estimated"), "with"), (MSGLD("estimated"), "without"),
    ])
    def test_matches_generic_runner(self, toy20, kernel, mode):
        scheme = MinibatchScheme(3, mode)
        spec = ChainSpec(0.3 / toy20.A, 4000, 0.2, seed=21, burn_in=100)
        g = run_chain(kernel, toy20, scheme, spec, key=(5,))
        f = run_linear_chain(kernel, toy20, scheme, spec, key=(5,))
        assert f.moment(1) == pytest.approx(g.stats.moment(1)[0], rel=1e-11)
        assert f.moment(4) == pytest.approx(g.stats.moment(4)[0], rel=1e-11)
        assert f.collapses == g.collapses
        assert f.theta == pytest.approx(g.theta[0], rel=1e-12)

    def test_gradient_cov_not_compiled(self, toy20):
        with pytest.raises(TypeError):
            run_linear_chain(MSGLD(cov_of="gradient"), toy20, MinibatchScheme(3), ChainSpec(0.01, 10))

    def test_batches_partition_samples(self, toy20):
        res = run_linear_chain(SGLD(), toy20, MinibatchScheme(2), ChainSpec(0.01, 1000, 0.0, burn_in=10),
                               n_batches=7)
        assert res.count == 990
        assert res.moment(2) == pytest.approx(np.average(res.batch_moments(2), weights=res.counts))

    def test_divergence_reported(self, toy20):
        res = run_linear_chain(Euler(), toy20, None, ChainSpec(2.5 / toy20.A, 5000, 1.0), stability="ignore")
        assert res.diverged

    def test_euler_reference_coupling(self, toy20):
        # an Euler chain coupled to an Euler reference reproduces it exactly
        res = run_linear_chain(Euler(), toy20, None, ChainSpec(0.01, 2000, 0.0), reference="euler")
        assert res.moment(2) == pytest.approx(res.moment(2, reference=True), rel=1e-14)

    def test_exact_reference_is_stationary(self):
        # exact OU transitions started in stationarity keep the target variance
        ou = OuProcess(0.0, 1.0)
        res = run_linear_chain(Euler(), ou, None, ChainSpec(0.1, 400000, 0.0, seed=3), reference="exact",
                               n_batches=40)
        assert res.moment(2, reference=True) == pytest.approx(1.0, abs=0.03)

    def test_replicates_block_layout_independent_of_block_count(self, toy20):
        spec = ChainSpec(0.01, 200, 0.0, seed=8)
        a = run_linear_replicates(SGLD(), toy20, MinibatchScheme(2), spec, 10, key=(1,), block=10)
        b = run_linear_replicates(SGLD(), toy20, MinibatchScheme(2), spec, 4, key=(1,), block=10)
        np.testing.assert_array_equal(a.sums[:4], b.sums)

    def test_long_run_mean_and_variance(self, toy20):
        # a cheap version of the stationary checks: SGLD mean and variance formulas
        scheme = MinibatchScheme(5)
        h = 0.2 / toy20.A
        res = run_linear_chain(SGLD(), toy20, scheme, ChainSpec(h, 2_000_000, toy20.posterior_mean, seed=1),
                               n_batches=50)
        m = res.batch_moments(1)
        assert abs(m.mean() - toy20.posterior_mean) < 4 * m.std(ddof=1) / math.sqrt(50)
        v = res.batch_moments(2) - m**2
        assert abs(v.mean() - ta.asymptotic_var_sgld(toy20, scheme, h)) < 4 * v.std(ddof=1) / math.sqrt(50)
