"""Replicated Monte Carlo summaries and scaling-law utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .samplers import (
    ChainSpec,
    MSGLD,
    DivergenceError,
    run_chain,
    run_linear_chain,
    run_linear_replicates,
    linear_form,
)


class ReplicateError(ValueError):
    pass


def jackknife_se(values, statistic: Callable[[np.ndarray], float]) -> float:
    """Leave-one-out jackknife standard error of ``statistic(values)``."""
    v = np.asarray(values, dtype=float)
    R = v.shape[0]
    if R < 2:
        return float("nan")
    loo = np.array([statistic(np.delete(v, i, axis=0)) for i in range(R)])
    return float(math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2)))


def _mean_square_jackknife(x) -> float:
    # closed form of the jackknife for the mean of squared errors: the
    # leave-one-out means are affine in each x_i, so the generic loop is not needed
    x = np.asarray(x, dtype=float)
    R = x.size
    return float(x.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")


@dataclass
class ReplicateSummary:
    """Per-replicate estimates against a ground truth."""

    values: np.ndarray
    truth: float = float("nan")
    n_diverged: int = 0
    collapses: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def variance(self) -> float:
        """Replicate variance with divisor R, so that mse = bias^2 + variance."""
        return float(self.values.var())

    @property
    def bias(self) -> float:
        return self.mean - self.truth

    @property
    def mse(self) -> float:
        return float(np.mean((self.values - self.truth) ** 2))

    @property
    def mean_se(self) -> float:
        return float(self.values.std(ddof=1) / math.sqrt(self.R)) if self.R > 1 else float("nan")

    @property
    def mse_se(self) -> float:
        return _mean_square_jackknife((self.values - self.truth) ** 2)

    def decomposition_gap(self) -> float:
        return abs(self.mse - (self.bias**2 + self.variance))

    def merge(self, other: "ReplicateSummary") -> "ReplicateSummary":
        if not (self.truth == other.truth or (math.isnan(self.truth) and math.isnan(other.truth))):
            raise ValueError("cannot merge summaries with different ground truths")
        return ReplicateSummary(np.concatenate([self.values, other.values]), self.truth,
                                self.n_diverged + other.n_diverged, self.collapses + other.collapses)


def _is_linear(model, kernel=None) -> bool:
    if isinstance(kernel, MSGLD) and kernel.cov_of != "drift":
        return False
    try:
        linear_form(model)
    except TypeError:
        return False
    return True


def _replicate_power_sums(kernel, model, scheme, spec, R, seed, key, seeds, stability):
    """(sums (R_ok, 4), n_diverged, collapses) for the linear models."""
    if seeds is None:
        spec = ChainSpec(spec.h, spec.K, spec.theta0, seed, spec.burn_in)
        rep = run_linear_replicates(kernel, model, scheme, spec, R, key, stability=stability)
        ok = rep.ok
        return rep.sums[ok] / rep.count, int((~ok).sum()), int(rep.collapses.sum())
    # seeded replicates reproduce run_chain(seed, key) draw for draw
    rows, div, coll = [], 0, 0
    for s in seeds:
        res = run_linear_chain(kernel, model, scheme, ChainSpec(spec.h, spec.K, spec.theta0, s, spec.burn_in),
                               key, stability=stability)
        coll += res.collapses
        if res.diverged:
            div += 1
        else:
            rows.append(res.sums[0] / res.count)
    return np.array(rows).reshape(-1, 4), div, coll


def _generic_averages(kernel, model, scheme, spec, phis, R, seed, key, seeds, stability):
    rows, div, coll = [], 0, 0
    for r in range(R):
        s = seed if seeds is None else seeds[r]
        k = key + (r,) if seeds is None else key
        run_spec = ChainSpec(spec.h, spec.K, spec.theta0, s, spec.burn_in)
        try:
            res = run_chain(kernel, model, scheme, run_spec, functions=phis, key=k, stability=stability)
        except DivergenceError:
            div += 1
            continue
        coll += res.collapses
        rows.append([float(np.sum(res.stats.average(name))) for name in phis])
    return np.array(rows).reshape(-1, len(phis)), div, coll


def _check_seeds(R, seeds):
    if R < 2:
        raise ReplicateError("need at least two replicates")
    if seeds is not None:
        seeds = [int(s) for s in seeds]
        if len(seeds) != R:
            raise ReplicateError("one seed per replicate is required")
        if len(set(seeds)) != len(seeds):
            raise ReplicateError("replicate seeds must be distinct")
    return seeds


def estimate_mse(kernel, model, scheme, spec: ChainSpec, phi=2, truth: float = 0.0, R: int = 100,
                 seed: int = 0, key=(), seeds=None, stability: str = "warn") -> ReplicateSummary:
    """MSE of the chain average of ``phi`` over R independent replicates.

    ``phi`` is a power p in 1..4 (theta^p; fast path for the linear models)
    or a callable of the state.  Replicates that diverge are dropped and
    counted.  Explicit ``seeds`` must be distinct.
    """
    seeds = _check_seeds(R, seeds)
    if isinstance(phi, (int, np.integer)) and _is_linear(model, kernel):
        if not 1 <= phi <= 4:
            raise ValueError("power must be between 1 and 4")
        avg, div, coll = _replicate_power_sums(kernel, model, scheme, spec, R, seed, key, seeds, stability)
        values = avg[:, phi - 1]
    else:
        fn = phi if callable(phi) else (lambda x, p=int(phi): x**p)
        avg, div, coll = _generic_averages(kernel, model, scheme, spec, {"phi": fn}, R, seed, key, seeds,
                                           stability)
        values = avg[:, 0]
    if values.size == 0:
        raise ReplicateError("every replicate diverged")
    return ReplicateSummary(values, float(truth), div, coll)


def estimate_ere(kernel, model, scheme, spec: ChainSpec, R: int = 100, seed: int = 0, key=(),
                 seeds=None, stability: str = "warn") -> ReplicateSummary:
    """Relative error of the within-chain variance against sigma_p^2.

    Each replicate contributes (S_2 - S_1^2) / sigma_p^2 - 1 with S_p the
    chain average of theta^p; the summary mean is the ERE and ``truth`` is 0.
    """
    seeds = _check_seeds(R, seeds)
    sp2 = float(model.posterior_var)
    if not sp2 > 0:
        raise ValueError("posterior variance must be positive")
    if _is_linear(model, kernel):
        avg, div, coll = _replicate_power_sums(kernel, model, scheme, spec, R, seed, key, seeds, stability)
        s1, s2 = avg[:, 0], avg[:, 1]
    else:
        phis = {"s1": lambda x: x, "s2": lambda x: x * x}
        avg, div, coll = _generic_averages(kernel, model, scheme, spec, phis, R, seed, key, seeds, stability)
        s1, s2 = avg[:, 0], avg[:, 1]
    if s1.size == 0:
        raise ReplicateError("every replicate diverged")
    n_rec = spec.K - spec.burn_in
    values = (s2 - s1 * s1) / sp2 - 1.0
    out = ReplicateSummary(values, 0.0, div, coll)
    out.extra["degenerate"] = n_rec < 2
    return out


# -- batch means ---------------------------------------------------------------------


def batch_means_se(batch_values, batch_counts=None) -> float:
    """Standard error of a long-run average from (weighted) batch means."""
    v = np.asarray(batch_values, dtype=float)
    B = v.size
    if B < 2:
        return float("nan")
    if batch_counts is None:
        return float(v.std(ddof=1) / math.sqrt(B))
    w = np.asarray(batch_counts, dtype=float)
    w = w / w.sum()
    mean = np.sum(w * v)
    return float(math.sqrt(np.sum(w**2 * (v - mean) ** 2) * B / (B - 1)))


# -- regression ------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    prefactor: float
    r_squared: float
    n_points: int
    exponent_se: float = float("nan")


def fit_power_law(x, y) -> PowerLawFit:
    """Least-squares fit of log y = log c + k log x over positive pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 3:
        raise ValueError("need at least three positive (x, y) pairs")
    lx, ly = np.log(x), np.log(y)
    (k, c), cov = np.polyfit(lx, ly, 1, cov=True) if x.size > 3 else (np.polyfit(lx, ly, 1), None)
    resid = ly - (k * lx + c)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    se = float(math.sqrt(cov[0, 0])) if cov is not None else float("nan")
    return PowerLawFit(float(k), float(math.exp(c)), float(r2), int(x.size), se)


# -- one-dimensional minimisation --------------------------------------------------------

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_search(f, lo: float, hi: float, rtol: float = 1e-6, atol: float = 0.0,
                          max_iter: int = 500):
    """Minimise a unimodal f on [lo, hi]; returns (x, f(x), evaluations).

    Stops once the bracket is narrower than max(rtol * |x|, atol).
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    n_eval = 2
    for _ in range(max_iter):
        if b - a <= max(rtol * max(abs(c), abs(d)), atol):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        n_eval += 1
    x, fx = (c, fc) if fc < fd else (d, fd)
    return x, fx, n_eval


def _count_local_minima(vals) -> int:
    v = np.asarray(vals)
    inner = (v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])
    return int(inner.sum()) + int(v[0] < v[1]) + int(v[-1] < v[-2])


@dataclass(frozen=True)
class OptimalStep:
    K: int
    h: float
    mse: float
    unimodal: bool
    at_boundary: bool
    evaluations: int


def minimise_over_step(objective, h_max: float, grid: int = 60, rtol: float = 1e-6,
                       h_min_ratio: float = 1e-8) -> tuple[float, float, bool, bool, int]:
    """Grid scan in log h followed by golden-section refinement.

    Returns (h*, f(h*), unimodal, at_boundary, evaluations).  When the scan
    finds several local minima the best grid bracket is refined and the
    result is flagged non-unimodal.
    """
    hs = h_max * np.logspace(math.log10(h_min_ratio), 0.0, grid + 2)[1:-1]
    vals = np.array([objective(h) for h in hs])
    i = int(np.argmin(vals))
    unimodal = _count_local_minima(vals) <= 1
    at_boundary = i in (0, grid - 1)
    lo = hs[max(i - 1, 0)] if i > 0 else hs[0] * 1e-3
    hi = hs[min(i + 1, grid - 1)] if i < grid - 1 else h_max * (1 - 1e-12)
    # refine in log h: the objective is much closer to unimodal there
    x, fx, n = golden_section_search(lambda u: objective(math.exp(u)), math.log(lo), math.log(hi),
                                     rtol=0.0, atol=rtol / 10)
    h = math.exp(x)
    if vals[i] < fx:
        h, fx = float(hs[i]), float(vals[i])
    return h, float(fx), unimodal, at_boundary, grid + n


def optimal_h_curve(model, scheme, Ks, method: str = "sgld", theta0: float = 0.0, grid: int = 60,
                    rtol: float = 1e-6) -> list[OptimalStep]:
    """For each K the step size minimising the exact MSE of the theta^2 average."""
    from .toy_analytic import analytic_mse2

    h_max = 1.0 / model.A
    out = []
    for K in Ks:
        K = int(K)
        if K < 1:
            raise ValueError("K must be positive")

        def obj(h, K=K):
            return analytic_mse2(model, scheme, h, K, theta0, method)

        h, f, uni, edge, n = minimise_over_step(obj, h_max * (1 - 1e-9), grid, rtol)
        out.append(OptimalStep(K, h, f, uni, edge or K == 1, n))
    return out
