"""Bayesian posteriors used by the samplers and synthetic data generators.

Every model exposes ``N`` (number of data items), ``dim``,
``grad_log_prior(theta)``, ``grad_log_lik(theta, indices)`` (one row per
index), ``log_density(theta)`` (unnormalised) and ``full_gradient(theta)``.
Models are immutable after construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .gradients import MinibatchScheme
from .rng import generator


class DegenerateDataError(ValueError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class _Model:
    N: int
    dim: int

    def full_gradient(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        lik = self.grad_log_lik(theta, np.arange(self.N))
        return self.grad_log_prior(theta) + lik.sum(axis=0)


@dataclass(frozen=True, eq=False)
class GaussianConjugateModel(_Model):
    """theta ~ N(0, sigma_theta_sq);  X_i | theta ~ N(theta, sigma_x_sq)."""

    sigma_theta_sq: float
    sigma_x_sq: float
    data: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not self.sigma_theta_sq > 0 or not self.sigma_x_sq > 0:
            raise ValueError("prior and likelihood variances must be positive")
        object.__setattr__(self, "data", _freeze(np.ravel(self.data)))

    @property
    def N(self) -> int:
        return int(self.data.size)

    @property
    def dim(self) -> int:
        return 1

    @property
    def A(self) -> float:
        return 0.5 * (1.0 / self.sigma_theta_sq + self.N / self.sigma_x_sq)

    @property
    def posterior_mean(self) -> float:
        return float(self.data.sum() / (self.sigma_x_sq / self.sigma_theta_sq + self.N))

    @property
    def posterior_var(self) -> float:
        return 1.0 / (1.0 / self.sigma_theta_sq + self.N / self.sigma_x_sq)

    @property
    def offsets(self) -> np.ndarray:
        """Per-datum contributions w_i = X_i / (2 sigma_x^2) to the drift offset B."""
        return self.data / (2.0 * self.sigma_x_sq)

    def grad_log_prior(self, theta):
        return -np.atleast_1d(theta) / self.sigma_theta_sq

    def grad_log_lik(self, theta, indices):
        x = self.data[np.asarray(indices, dtype=np.int64)]
        return ((x - np.atleast_1d(theta)[0]) / self.sigma_x_sq)[:, None]

    def log_density(self, theta):
        t = float(np.atleast_1d(theta)[0])
        return -0.5 * (t - self.posterior_mean) ** 2 / self.posterior_var

    def with_data(self, data) -> "GaussianConjugateModel":
        return GaussianConjugateModel(self.sigma_theta_sq, self.sigma_x_sq, data)


@dataclass(frozen=True)
class OuProcess(_Model):
    """Gaussian target N(mu, sigma_sq) seen as a model with one pseudo-datum.

    Its Langevin diffusion is the Ornstein-Uhlenbeck process with drift
    -(theta - mu) / (2 sigma_sq).
    """

    mu: float = 0.0
    sigma_sq: float = 1.0

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")

    N = 1
    dim = 1

    @property
    def A(self) -> float:
        return 0.5 / self.sigma_sq

    @property
    def posterior_mean(self) -> float:
        return float(self.mu)

    @property
    def posterior_var(self) -> float:
        return float(self.sigma_sq)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([self.mu / (2.0 * self.sigma_sq)])

    def grad_log_prior(self, theta):
        return np.zeros(1)

    def grad_log_lik(self, theta, indices):
        k = np.asarray(indices).size
        return np.full((k, 1), -(np.atleast_1d(theta)[0] - self.mu) / self.sigma_sq)

    def log_density(self, theta):
        t = float(np.atleast_1d(theta)[0])
        return -0.5 * (t - self.mu) ** 2 / self.sigma_sq


@dataclass(frozen=True, eq=False)
class LogisticRegressionModel(_Model):
    """p(y_i | x_i, beta) = sigmoid(y_i beta^T x_i) with a N(0, P^{-1}) prior."""

    covariates: np.ndarray
    labels: np.ndarray
    prior_precision: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        y = np.ravel(np.asarray(self.labels, dtype=float))
        if x.shape[0] != y.size:
            raise ValueError("covariates and labels disagree on N")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        p = np.eye(x.shape[1]) if self.prior_precision is None else np.asarray(self.prior_precision, float)
        if p.shape != (x.shape[1], x.shape[1]):
            raise ValueError("prior precision must be d x d")
        object.__setattr__(self, "covariates", _freeze(x))
        object.__setattr__(self, "labels", _freeze(y))
        object.__setattr__(self, "prior_precision", _freeze(p))
        # y_i x_i, used by every gradient evaluation
        object.__setattr__(self, "_yx", _freeze(x * y[:, None]))

    @property
    def N(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.covariates.shape[1])

    def grad_log_prior(self, theta):
        return -self.prior_precision @ np.asarray(theta, dtype=float)

    def grad_log_lik(self, theta, indices):
        yx = self._yx[np.asarray(indices, dtype=np.int64)]
        # d/dbeta log sigmoid(z) = sigmoid(-z) * y x, z = y beta^T x
        return yx * expit(-(yx @ np.asarray(theta, dtype=float)))[:, None]

    def log_density(self, theta):
        beta = np.asarray(theta, dtype=float)
        z = self._yx @ beta
        return float(-0.5 * beta @ self.prior_precision @ beta - np.logaddexp(0.0, -z).sum())


def toy_posterior_params(model: GaussianConjugateModel) -> tuple[float, float, float]:
    """(mu_p, sigma_p^2, A) of the conjugate Gaussian posterior."""
    return model.posterior_mean, model.posterior_var, model.A


def toy_var_b(model: GaussianConjugateModel, scheme: MinibatchScheme) -> float:
    """Variance of the minibatch offset B = (N/n) sum X_tau / (2 sigma_x^2)."""
    N = model.N
    if N < 2:
        raise DegenerateDataError("Var(B) needs at least two data items")
    scheme.validate(N)
    var_x = float(np.var(model.data, ddof=1))
    n = scheme.n
    k = N * (N - 1) if scheme.with_replacement else N * (N - n)
    return k / n * var_x / (4.0 * model.sigma_x_sq**2)


def model_gradients(model, theta) -> tuple[np.ndarray, np.ndarray]:
    """Prior gradient and the (N, d) matrix of per-datum likelihood gradients."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return model.grad_log_prior(theta), model.grad_log_lik(theta, np.arange(model.N))


def generate_toy_data(theta_true: float, sigma_x_sq: float, N: int, seed: int) -> np.ndarray:
    if not sigma_x_sq > 0:
        raise ValueError("sigma_x_sq must be positive")
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = generator(seed, 0x70)
    return theta_true + np.sqrt(sigma_x_sq) * rng.standard_normal(N)


def generate_logistic_data(
    N: int, d: int, seed: int, beta_true=None, prior_precision=None
) -> LogisticRegressionModel:
    """Covariates N(0,1) with a final all-ones intercept column; labels from the model.

    ``beta_true`` defaults to zeros except a unit first coefficient when d >= 2.
    """
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    rng = generator(seed, 0x10)
    x = np.ones((N, d))
    x[:, : d - 1] = rng.standard_normal((N, d - 1))
    beta = default_beta(d) if beta_true is None else np.asarray(beta_true, dtype=float)
    if beta.shape != (d,):
        raise ValueError("beta_true must have length d")
    p_pos = expit(x @ beta)
    y = np.where(rng.random(N) < p_pos, 1.0, -1.0)
    return LogisticRegressionModel(x, y, prior_precision)


def default_beta(d: int) -> np.ndarray:
    beta = np.zeros(d)
    if d >= 2:
        beta[0] = 1.0
    return beta


# -- CSV persistence ---------------------------------------------------------


def save_toy_csv(path, data) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x"])
        for v in np.ravel(data):
            w.writerow([repr(float(v))])


def load_toy_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["x"]) for r in rows])


def save_logistic_csv(path, model: LogisticRegressionModel) -> None:
    d = model.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(d)] + ["y"])
        for xi, yi in zip(model.covariates, model.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def load_logistic_csv(path, prior_precision=None) -> LogisticRegressionModel:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if header[-1] != "y":
        raise ValueError(f"{path}: last column must be 'y'")
    arr = np.array(rows, dtype=float)
    return LogisticRegressionModel(arr[:, :-1], arr[:, -1], prior_precision)
