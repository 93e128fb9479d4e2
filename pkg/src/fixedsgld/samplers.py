"""Langevin transition kernels and a deterministic chain runner.

Step rules, with ``f_hat`` the drift estimate (half the gradient estimate)::

    euler   theta' = theta + (h/2) grad log pi(theta) + sqrt(h) xi
    sgld    theta' = theta + h f_hat(theta) + sqrt(h) xi
    msgld   theta' = theta + h f_hat(theta) + sqrt(h) (I - (h/2) Cov f_hat) xi

Chains average the post-update states theta_1..theta_K.  Each step first
draws the minibatch from the chain's ``minibatch`` stream and then the
Gaussian increment from its ``noise`` stream.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import _fastchain
from .gradients import (
    MinibatchSampler,
    MinibatchScheme,
    estimate_gradient,
    estimate_gradient_covariance,
    exact_gradient_covariance,
)
from .models import GaussianConjugateModel, OuProcess, toy_var_b
from .rng import chain_streams

_NOISE_BLOCK = 4096


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str | None = None):
        self.step = int(step)
        super().__init__(message or f"chain diverged at step {self.step}")


class StabilityWarning(UserWarning):
    pass


class StepSizeError(ValueError):
    pass


# -- kernels -----------------------------------------------------------------


@dataclass(frozen=True)
class Euler:
    name = "euler"


@dataclass(frozen=True)
class SGLD:
    name = "sgld"


@dataclass(frozen=True)
class MSGLD:
    """Modified SGLD.

    ``cov_source`` is ``"exact"`` or ``"estimated"``.  ``cov_of`` picks the
    covariance in the noise correction: ``"drift"`` uses Cov(f_hat), the
    default, and ``"gradient"`` uses Cov of the full log-density gradient
    estimate, which is four times larger.
    """

    cov_source: str = "exact"
    cov_of: str = "drift"
    name = "msgld"

    def __post_init__(self):
        if self.cov_source not in ("exact", "estimated"):
            raise ValueError(f"cov_source must be 'exact' or 'estimated', got {self.cov_source!r}")
        if self.cov_of not in ("drift", "gradient"):
            raise ValueError(f"cov_of must be 'drift' or 'gradient', got {self.cov_of!r}")

    @property
    def cov_factor(self) -> float:
        return 4.0 if self.cov_of == "gradient" else 1.0


@dataclass(frozen=True)
class RWM:
    scale: float = 1.0
    name = "rwm"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"proposal scale must be positive, got {self.scale}")


def make_kernel(name: str, **kw):
    name = name.lower()
    if name == "euler":
        return Euler()
    if name == "sgld":
        return SGLD()
    if name == "msgld":
        return MSGLD(**kw)
    if name == "rwm":
        return RWM(**kw)
    raise ValueError(f"unknown kernel {name!r}")


# -- single steps --------------------------------------------------------------


def _finite_or_raise(theta, step):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(step)
    return theta


def euler_step(model, theta, h, xi, step: int = 0) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = theta + (0.5 * h) * model.full_gradient(theta) + math.sqrt(h) * np.asarray(xi)
    return _finite_or_raise(out, step)


def _drift(f_hat):
    return f_hat.drift if hasattr(f_hat, "drift") else np.asarray(f_hat, dtype=float)


def sgld_step(f_hat, theta, h, xi, step: int = 0) -> np.ndarray:
    """``f_hat`` is a GradientEstimate or the drift vector itself."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = theta + h * _drift(f_hat) + math.sqrt(h) * np.asarray(xi)
    return _finite_or_raise(out, step)


def noise_multiplier(cov, h) -> np.ndarray:
    c = np.atleast_2d(getattr(cov, "matrix", cov))
    return np.eye(c.shape[0]) - 0.5 * h * c


def is_collapsed(multiplier) -> bool:
    """True when the mSGLD noise multiplier has a non-positive eigenvalue."""
    m = np.atleast_2d(multiplier)
    if m.shape == (1, 1):
        return bool(m[0, 0] <= 0.0)
    return bool(np.linalg.eigvalsh(0.5 * (m + m.T)).min() <= 0.0)


def msgld_step(f_hat, cov, theta, h, xi, step: int = 0) -> tuple[np.ndarray, bool]:
    """One mSGLD update; returns ``(theta', collapsed)``.

    The step is taken with the multiplier as-is even when it collapses; the
    flag lets the caller count such events.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    mult = noise_multiplier(cov, h)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    out = theta + h * _drift(f_hat) + math.sqrt(h) * (mult @ xi)
    return _finite_or_raise(out, step), is_collapsed(mult)


def metropolis_accept(log_ratio: float, u: float) -> bool:
    """Accept with probability min(1, exp(log_ratio)) given u ~ U(0,1)."""
    if log_ratio >= 0:
        return True
    return bool(u < math.exp(log_ratio))


def rwm_step(model, theta, proposal_scale, rng, accept_rng=None, log_p=None):
    """Random-walk Metropolis step; returns ``(theta', log_p', accepted)``."""
    if not proposal_scale > 0:
        raise ValueError("proposal scale must be positive")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if log_p is None:
        log_p = model.log_density(theta)
    prop = theta + proposal_scale * rng.standard_normal(theta.size)
    log_q = model.log_density(prop)
    u = (accept_rng or rng).random()
    if metropolis_accept(log_q - log_p, u):
        return prop, log_q, True
    return theta, log_p, False


# -- statistics ------------------------------------------------------------------


class RunningStats:
    """Streaming sums of theta^p (p = 1..max_power) per coordinate.

    Optional extras: the cross-moment sum ``sum theta theta^T`` and arbitrary
    named test functions whose values are summed.
    """

    def __init__(self, dim: int, max_power: int = 4, cross: bool = False, functions=None):
        self.dim = int(dim)
        self.max_power = int(max_power)
        self.count = 0
        self.power_sums = np.zeros((self.max_power, self.dim))
        self.cross_sum = np.zeros((self.dim, self.dim)) if cross else None
        self.functions: dict[str, Callable] = dict(functions or {})
        self.function_sums: dict[str, np.ndarray | float] = {k: 0.0 for k in self.functions}

    def push(self, theta) -> None:
        x = np.asarray(theta, dtype=float).reshape(self.dim)
        self.count += 1
        p = x.copy()
        # huge but finite states overflow in the higher powers just before a divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(self.max_power):
                self.power_sums[k] += p
                p = p * x
        if self.cross_sum is not None:
            self.cross_sum += np.outer(x, x)
        for name, fn in self.functions.items():
            self.function_sums[name] = self.function_sums[name] + np.asarray(fn(x), dtype=float)

    def push_block(self, thetas) -> None:
        for t in np.asarray(thetas, dtype=float).reshape(-1, self.dim):
            self.push(t)

    def _compatible(self, other: "RunningStats") -> None:
        if (other.dim, other.max_power) != (self.dim, self.max_power):
            raise ValueError("cannot merge stats of different shape")
        if (self.cross_sum is None) != (other.cross_sum is None):
            raise ValueError("cannot merge stats with and without cross moments")
        if set(self.functions) != set(other.functions):
            raise ValueError("cannot merge stats with different test functions")

    def merge(self, other: "RunningStats") -> "RunningStats":
        self._compatible(other)
        out = RunningStats(self.dim, self.max_power, self.cross_sum is not None, self.functions)
        out.count = self.count + other.count
        out.power_sums = self.power_sums + other.power_sums
        if out.cross_sum is not None:
            out.cross_sum = self.cross_sum + other.cross_sum
        for k in self.functions:
            out.function_sums[k] = self.function_sums[k] + other.function_sums[k]
        return out

    def moment(self, p: int = 1) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.power_sums[p - 1] / self.count

    def mean(self) -> np.ndarray:
        return self.moment(1)

    def variance(self) -> np.ndarray:
        """Within-chain variance with divisor K."""
        m = self.moment(1)
        return self.moment(2) - m * m

    def average(self, name: str):
        return self.function_sums[name] / self.count


# -- chain runner ------------------------------------------------------------------


@dataclass(frozen=True)
class ChainSpec:
    h: float
    K: int
    theta0: np.ndarray | float = 0.0
    seed: int = 0
    burn_in: int = 0

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise StepSizeError(f"step size must be positive, got {self.h}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not 0 <= self.burn_in < self.K:
            raise ValueError("burn-in must satisfy 0 <= b < K")
        object.__setattr__(self, "theta0", np.atleast_1d(np.asarray(self.theta0, dtype=float)))


@dataclass
class ChainResult:
    stats: RunningStats
    theta: np.ndarray
    steps: int
    collapses: int = 0
    accepted: int = 0
    trace: np.ndarray | None = None

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps if self.steps else float("nan")


def check_stability(model, kernel, h, policy: str = "warn") -> None:
    """Toy-model stability check: Langevin kernels need h < 1/A."""
    A = getattr(model, "A", None)
    if A is None or isinstance(kernel, RWM) or policy == "ignore":
        return
    if h * A >= 1.0:
        msg = f"h*A = {h * A:.4g} >= 1: the chain is not stable"
        if policy == "error":
            raise StepSizeError(msg)
        warnings.warn(msg, StabilityWarning, stacklevel=3)


class Chain:
    """A resumable chain.  ``advance`` continues the same random streams,
    so two consecutive calls reproduce one longer call step for step."""

    def __init__(self, kernel, model, scheme: MinibatchScheme | None, theta0, h, seed=0, key=(),
                 stability: str = "warn"):
        self.kernel = kernel
        self.model = model
        self.h = float(h)
        if not self.h > 0:
            raise StepSizeError(f"step size must be positive, got {h}")
        check_stability(model, kernel, self.h, stability)
        if isinstance(kernel, (SGLD, MSGLD)):
            scheme = scheme or MinibatchScheme.full(model.N)
            scheme.validate(model.N)
        self.scheme = scheme
        self.theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
        if self.theta.size != model.dim:
            raise ValueError("theta0 has the wrong dimension")
        self.streams = chain_streams(seed, *key)
        self.sampler = MinibatchSampler(model.N, scheme, self.streams.minibatch) if scheme else None
        self.step_count = 0
        self.collapses = 0
        self.accepted = 0
        self._log_p = None
        self._exact_cov = None
        if isinstance(kernel, MSGLD) and kernel.cov_source == "estimated" and scheme.n < 2:
            raise ValueError("estimated covariance needs n >= 2")

    def _exact_covariance(self):
        if isinstance(self.model, (GaussianConjugateModel, OuProcess)):
            # theta-independent for linear-Gaussian models
            if self._exact_cov is None:
                self._exact_cov = exact_gradient_covariance(self.model, self.theta, self.scheme).matrix
            return self._exact_cov
        return exact_gradient_covariance(self.model, self.theta, self.scheme).matrix

    def _one(self, xi):
        k = self.step_count + 1
        kern = self.kernel
        if isinstance(kern, Euler):
            self.theta = euler_step(self.model, self.theta, self.h, xi, k)
        elif isinstance(kern, SGLD):
            est = estimate_gradient(self.model, self.theta, self.sampler.draw())
            self.theta = sgld_step(est, self.theta, self.h, xi, k)
        elif isinstance(kern, MSGLD):
            idx = self.sampler.draw()
            est = estimate_gradient(self.model, self.theta, idx)
            if kern.cov_source == "exact":
                cov = self._exact_covariance()
            else:
                cov = estimate_gradient_covariance(self.model, self.theta, idx, self.scheme.mode).matrix
            if kern.cov_of == "gradient":
                cov = kern.cov_factor * cov
            self.theta, collapsed = msgld_step(est, cov, self.theta, self.h, xi, k)
            self.collapses += collapsed
        else:
            prop = self.theta + kern.scale * xi
            if self._log_p is None:
                self._log_p = self.model.log_density(self.theta)
            log_q = self.model.log_density(prop)
            if metropolis_accept(log_q - self._log_p, self.streams.accept.random()):
                self.theta, self._log_p = prop, log_q
                self.accepted += 1
        self.step_count = k

    def advance(self, K: int, stats: RunningStats | None = None, burn_in: int = 0,
                thin: int | None = None) -> ChainResult:
        d = self.model.dim
        stats = stats if stats is not None else RunningStats(d)
        trace = [] if thin else None
        done = 0
        while done < K:
            m = min(_NOISE_BLOCK, K - done)
            noise = self.streams.noise.standard_normal((m, d))
            for i in range(m):
                self._one(noise[i])
                j = done + i
                if j >= burn_in:
                    stats.push(self.theta)
                    if thin and (j - burn_in) % thin == 0:
                        trace.append(self.theta.copy())
            done += m
        return ChainResult(stats, self.theta.copy(), self.step_count, self.collapses, self.accepted,
                           np.array(trace) if trace is not None else None)


def run_chain(kernel, model, scheme, spec: ChainSpec, functions: Mapping[str, Callable] | None = None,
              key=(), cross: bool = False, thin: int | None = None, stability: str = "warn") -> ChainResult:
    """Run ``spec.K`` steps and return statistics of theta_{b+1}..theta_K."""
    chain = Chain(kernel, model, scheme, spec.theta0, spec.h, spec.seed, key, stability)
    stats = RunningStats(model.dim, cross=cross, functions=functions)
    return chain.advance(spec.K, stats, spec.burn_in, thin)


def write_trace_csv(path, trace) -> None:
    import csv

    trace = np.atleast_2d(trace)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"theta{j + 1}" for j in range(trace.shape[1])])
        for i, row in enumerate(trace):
            w.writerow([i + 1] + [repr(float(v)) for v in row])


# -- compiled path for linear-Gaussian models ------------------------------------


@dataclass
class LinearChainResult:
    """Per-batch power sums of theta (and of an optional coupled reference)."""

    sums: np.ndarray  # (batches, 4)
    counts: np.ndarray
    theta: float
    collapses: int
    diverged_at: int = -1
    ref_sums: np.ndarray | None = None
    theta_ref: float | None = None

    @property
    def count(self) -> int:
        return int(self.counts.sum())

    @property
    def diverged(self) -> bool:
        return self.diverged_at >= 0

    def moment(self, p: int = 1, reference: bool = False) -> float:
        s = self.ref_sums if reference else self.sums
        return float(s[:, p - 1].sum() / self.count)

    def batch_moments(self, p: int = 1, reference: bool = False) -> np.ndarray:
        s = self.ref_sums if reference else self.sums
        return s[:, p - 1] / self.counts

    def stats(self) -> RunningStats:
        rs = RunningStats(1)
        rs.count = self.count
        rs.power_sums = self.sums.sum(axis=0)[:, None].copy()
        return rs


def linear_form(model) -> tuple[float, np.ndarray]:
    """(A, w) with drift estimate -A theta + (N/n) sum w_tau."""
    if isinstance(model, (GaussianConjugateModel, OuProcess)):
        return float(model.A), np.ascontiguousarray(model.offsets, dtype=float)
    raise TypeError(f"{type(model).__name__} is not a linear-Gaussian model")


def _exact_var_b(model, scheme) -> float:
    if scheme.is_full_batch(model.N) or model.N < 2:
        return 0.0
    return toy_var_b(model, scheme)


def _linear_setup(kernel, model, scheme, h, stability):
    A, w = linear_form(model)
    check_stability(model, kernel, h, stability)
    N = w.size
    scheme = scheme or MinibatchScheme.full(N)
    scheme.validate(N)
    if isinstance(kernel, Euler):
        method, var_exact, estimate = _fastchain.EULER, 0.0, False
    elif isinstance(kernel, SGLD):
        method, var_exact, estimate = _fastchain.SGLD, 0.0, False
    elif isinstance(kernel, MSGLD):
        if kernel.cov_of != "drift":
            raise TypeError("the compiled path supports the drift covariance only")
        method = _fastchain.MSGLD
        estimate = kernel.cov_source == "estimated"
        if estimate and scheme.n < 2:
            raise ValueError("estimated covariance needs n >= 2")
        var_exact = 0.0 if estimate else _exact_var_b(model, scheme)
    else:
        raise TypeError("the compiled path supports Euler, SGLD and mSGLD only")
    return A, w, scheme, method, var_exact, estimate


def run_linear_chain(kernel, model, scheme: MinibatchScheme | None, spec: ChainSpec, key=(),
                     n_batches: int = 1, reference: str | None = None,
                     stability: str = "warn") -> LinearChainResult:
    """Compiled equivalent of :func:`run_chain` for the toy and OU models.

    ``reference`` couples a second chain to the same Gaussian increments:
    ``"euler"`` runs the full-gradient Euler chain, ``"exact"`` the exact
    Ornstein-Uhlenbeck transition over time h.  Divergence is reported through
    ``diverged_at`` rather than raised.
    """
    A, w, scheme, method, var_exact, estimate = _linear_setup(kernel, model, scheme, spec.h, stability)
    n_rec = spec.K - spec.burn_in
    if not 1 <= n_batches <= n_rec:
        raise ValueError("n_batches must be between 1 and the number of recorded steps")

    b_full = float(w.sum())
    h = spec.h
    if reference is None:
        ref = (_fastchain.REF_NONE, 0.0, 0.0, 0.0)
    elif reference == "euler":
        ref = (_fastchain.REF_LINEAR, 1.0 - A * h, h * b_full, math.sqrt(h))
    elif reference == "exact":
        a = math.exp(-A * h)
        ref = (_fastchain.REF_LINEAR, a, (1.0 - a) * b_full / A,
               math.sqrt(-math.expm1(-2.0 * A * h) / (2.0 * A)))
    else:
        raise ValueError(f"unknown reference chain {reference!r}")

    streams = chain_streams(spec.seed, *key)
    theta0 = float(np.atleast_1d(spec.theta0)[0])
    sums, ref_sums, counts, theta, theta_r, coll, div = _fastchain.linear_chain_kernel(
        theta0, A, w, scheme.n, scheme.with_replacement, method, h, var_exact, estimate,
        int(spec.K), int(spec.burn_in), int(n_batches), streams.minibatch, streams.noise,
        np.arange(w.size, dtype=np.int64), *ref,
    )
    return LinearChainResult(sums, counts, float(theta), int(coll), int(div),
                             ref_sums if reference else None, float(theta_r) if reference else None)


@dataclass
class LinearReplicates:
    """Per-replicate power sums of theta_{b+1}..theta_K."""

    sums: np.ndarray  # (R, 4)
    collapses: np.ndarray
    diverged_at: np.ndarray
    count: int

    def averages(self, p: int = 1) -> np.ndarray:
        return self.sums[:, p - 1] / self.count

    @property
    def ok(self) -> np.ndarray:
        return self.diverged_at < 0


def run_linear_replicates(kernel, model, scheme, spec: ChainSpec, R: int, key=(),
                          block: int = 1000, stability: str = "warn") -> LinearReplicates:
    """R independent chains of ``spec``.

    Replicates are grouped in blocks of ``block`` chains; block b draws from
    the streams keyed ``key + (b,)`` and its chains consume consecutive
    segments of those streams.  The layout depends only on (seed, key, R,
    block), never on how the work is scheduled.
    """
    if R < 1 or block < 1:
        raise ValueError("R and block must be positive")
    A, w, scheme, method, var_exact, estimate = _linear_setup(kernel, model, scheme, spec.h, stability)
    theta0 = float(np.atleast_1d(spec.theta0)[0])
    parts = []
    for b, start in enumerate(range(0, R, block)):
        m = min(block, R - start)
        streams = chain_streams(spec.seed, *key, b)
        parts.append(_fastchain.linear_replicates_kernel(
            theta0, A, w, scheme.n, scheme.with_replacement, method, spec.h, var_exact, estimate,
            int(spec.K), int(spec.burn_in), m, streams.minibatch, streams.noise,
        ))
    sums, coll, div = (np.concatenate(x) for x in zip(*parts))
    return LinearReplicates(sums, coll, div, spec.K - spec.burn_in)
