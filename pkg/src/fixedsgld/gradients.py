"""Minibatch index sampling and unbiased stochastic gradient estimates.

Conventions
-----------
``estimate_gradient`` returns an estimate of the log-posterior gradient

    g(theta) = grad log pi0(theta) + (N/n) * sum_i grad log pi(X_tau_i | theta).

The samplers work with the Langevin *drift* ``f = g / 2``.  All covariance
bookkeeping is done on the drift: ``estimate_gradient_covariance`` and
``exact_gradient_covariance`` return ``Cov(f_hat)``, which is one quarter of
the covariance of ``g_hat``.  For the conjugate Gaussian model
``f_hat = -A theta + B`` so ``Cov(f_hat) = Var(B)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numba import njit


class InvalidSchemeError(ValueError):
    pass


class InsufficientSampleError(ValueError):
    pass


class SamplingMode(str, enum.Enum):
    WITH_REPLACEMENT = "with"
    WITHOUT_REPLACEMENT = "without"

    @classmethod
    def parse(cls, value: "SamplingMode | str") -> "SamplingMode":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-", "_")
        aliases = {
            "with": cls.WITH_REPLACEMENT,
            "with_replacement": cls.WITH_REPLACEMENT,
            "withreplacement": cls.WITH_REPLACEMENT,
            "without": cls.WITHOUT_REPLACEMENT,
            "without_replacement": cls.WITHOUT_REPLACEMENT,
            "withoutreplacement": cls.WITHOUT_REPLACEMENT,
        }
        if v not in aliases:
            raise InvalidSchemeError(f"unknown sampling mode {value!r}")
        return aliases[v]


@dataclass(frozen=True)
class MinibatchScheme:
    n: int
    mode: SamplingMode = SamplingMode.WITHOUT_REPLACEMENT

    def __post_init__(self):
        object.__setattr__(self, "mode", SamplingMode.parse(self.mode))
        if int(self.n) != self.n or self.n < 1:
            raise InvalidSchemeError(f"subsample size must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def with_replacement(self) -> bool:
        return self.mode is SamplingMode.WITH_REPLACEMENT

    def validate(self, N: int) -> None:
        if self.n > N:
            raise InvalidSchemeError(f"subsample size n={self.n} exceeds dataset size N={N}")

    def is_full_batch(self, N: int) -> bool:
        """True when every draw is the whole dataset, so the estimate is exact."""
        return self.n == N and not self.with_replacement

    @classmethod
    def full(cls, N: int) -> "MinibatchScheme":
        return cls(N, SamplingMode.WITHOUT_REPLACEMENT)


@dataclass
class GradientEstimate:
    value: np.ndarray
    indices: np.ndarray

    @property
    def drift(self) -> np.ndarray:
        return 0.5 * self.value


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray

    def is_psd(self, tol: float = 1e-10) -> bool:
        m = self.matrix
        return bool(np.allclose(m, m.T) and np.linalg.eigvalsh(m).min() >= -tol)


# Index draws use floor(u * m) with a 53-bit uniform u.  The bias relative to
# an exact bounded integer draw is below m * 2**-53.


@njit(cache=True)
def _partial_shuffle(buf, n, rng):
    N = buf.shape[0]
    for i in range(n):
        j = i + int(rng.random() * (N - i))
        t = buf[i]
        buf[i] = buf[j]
        buf[j] = t


@njit(cache=True)
def _iid_indices(out, N, rng):
    for i in range(out.shape[0]):
        out[i] = int(rng.random() * N)


class MinibatchSampler:
    """Stateful index sampler owned by one chain.

    Without replacement a partial Fisher-Yates pass over a persistent index
    buffer selects the first ``n`` slots.  The buffer is a permutation of
    ``0..N-1`` at all times, so each pass yields a uniformly random ordered
    n-subset whatever the previous arrangement was.  Cost is O(n) per draw
    after the O(N) setup.
    """

    def __init__(self, N: int, scheme: MinibatchScheme, rng: np.random.Generator):
        scheme.validate(N)
        self.N = N
        self.scheme = scheme
        self.rng = rng
        self._buf = np.arange(N, dtype=np.int64)

    def draw(self) -> np.ndarray:
        n = self.scheme.n
        if self.scheme.with_replacement:
            out = np.empty(n, dtype=np.int64)
            _iid_indices(out, self.N, self.rng)
            return out
        _partial_shuffle(self._buf, n, self.rng)
        return self._buf[:n].copy()


def sample_minibatch(N: int, scheme: MinibatchScheme, rng: np.random.Generator) -> np.ndarray:
    return MinibatchSampler(N, scheme, rng).draw()


def estimate_gradient(model, theta, indices) -> GradientEstimate:
    """Unbiased estimate of the log-posterior gradient from a minibatch.

    Per-datum terms are summed in sorted index order so that a full
    without-replacement batch reproduces ``model.full_gradient`` bit for bit.
    """
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("empty index list")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lik = model.grad_log_lik(theta, idx)
    value = model.grad_log_prior(theta) + (model.N / idx.size) * lik.sum(axis=0)
    return GradientEstimate(value=value, indices=np.asarray(indices))


def _covariance_scale(N: int, n: int, with_replacement: bool) -> float:
    # Drift covariance = 1/4 * N^2/n * (population covariance of per-datum
    # gradients of the sampled design); the sample covariance with divisor
    # n-1 is unbiased for S^2 (WOR) and for the population covariance (WR).
    if with_replacement:
        return N * N / (4.0 * n)
    return N * (N - n) / (4.0 * n)


def estimate_gradient_covariance(
    model, theta, indices, mode: SamplingMode | str = SamplingMode.WITHOUT_REPLACEMENT
) -> CovarianceEstimate:
    """Unbiased minibatch estimate of ``Cov(f_hat)`` for the drift estimator.

    Without replacement this is ``N(N-n)/(4 n (n-1)) * sum (g_i - g_bar)(g_i - g_bar)^T``
    over the sampled per-datum gradients; with replacement ``N - n`` becomes ``N``.
    """
    mode = SamplingMode.parse(mode)
    idx = np.asarray(indices, dtype=np.int64)
    n = idx.size
    if n < 2:
        raise InsufficientSampleError("covariance estimate needs at least two sampled items")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    g = model.grad_log_lik(theta, np.sort(idx))
    dev = g - g.mean(axis=0)
    scatter = dev.T @ dev / (n - 1)
    mat = _covariance_scale(model.N, n, mode is SamplingMode.WITH_REPLACEMENT) * scatter
    return CovarianceEstimate(0.5 * (mat + mat.T))


def exact_gradient_covariance(model, theta, scheme: MinibatchScheme) -> CovarianceEstimate:
    """Exact ``Cov(f_hat)`` at ``theta`` from all N per-datum gradients."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    N = model.N
    scheme.validate(N)
    g = model.grad_log_lik(theta, np.arange(N))
    dev = g - g.mean(axis=0)
    pop = dev.T @ dev / N
    n = scheme.n
    if scheme.with_replacement:
        mat = N * N / (4.0 * n) * pop
    elif N == 1:
        mat = np.zeros_like(pop)
    else:
        # S^2 = N/(N-1) * pop
        mat = N * (N - n) / (4.0 * n) * pop * N / (N - 1)
    return CovarianceEstimate(0.5 * (mat + mat.T))
