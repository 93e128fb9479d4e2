"""Exact moments, bias and mean squared error for the conjugate Gaussian model.

For this model every Langevin-type chain is an affine recursion

    theta_{j+1} = a theta_j + h B_j + s xi_j,     a = 1 - A h,

with ``B_j`` the minibatch offset (N/n) sum X_tau / (2 sigma_x^2), drawn
independently at every step, and ``s = sqrt(h)`` (Euler, SGLD) or
``sqrt(h) (1 - h Var(B) / 2)`` (mSGLD with the exact variance).  Moments of
``B`` up to order four come from power sums of the data combined with
Newton's identities, so everything below is closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb

import numpy as np

from .gradients import MinibatchScheme
from .models import DegenerateDataError, GaussianConjugateModel


class DomainError(ValueError):
    pass


METHODS = ("euler", "sgld", "msgld")


def _check_method(method: str) -> str:
    m = method.lower()
    if m not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    return m


# -- symmetric polynomials ------------------------------------------------------


def power_sums(x, k: int = 4) -> np.ndarray:
    """p_1..p_k with p_j = sum_i x_i^j."""
    x = np.asarray(x, dtype=float)
    return np.array([np.sum(x**j) for j in range(1, k + 1)])


def elementary_symmetric(p) -> np.ndarray:
    """e_1..e_k from power sums p_1..p_k via Newton's identities."""
    p = np.asarray(p, dtype=float)
    e = [1.0]
    for k in range(1, p.size + 1):
        acc = 0.0
        for i in range(1, k + 1):
            acc += (-1) ** (i - 1) * e[k - i] * p[i - 1]
        e.append(acc / k)
    return np.array(e[1:])


def _falling(x: int, k: int) -> int:
    out = 1
    for i in range(k):
        out *= x - i
    return out


def index_moment_table(x, with_replacement: bool) -> dict[tuple[int, ...], float]:
    """Mixed moments E[Y_1^{a_1} ... Y_m^{a_m}] over m distinct draw positions.

    Keys are exponent patterns such as (2, 1, 1).  Without replacement the
    positions hold distinct data items and each moment is a normalised
    symmetric polynomial; with replacement the positions are independent.
    """
    p1, p2, p3, p4 = power_sums(x)
    N = len(x)
    if with_replacement:
        mu = {1: p1 / N, 2: p2 / N, 3: p3 / N, 4: p4 / N}
        pats = [(1,), (2,), (1, 1), (3,), (2, 1), (1, 1, 1),
                (4,), (3, 1), (2, 2), (2, 1, 1), (1, 1, 1, 1)]
        return {pat: float(np.prod([mu[a] for a in pat])) for pat in pats}
    e1, e2, e3, e4 = elementary_symmetric([p1, p2, p3, p4])

    def norm(value, m):
        f = _falling(N, m)
        return value / f if f else 0.0

    return {
        (1,): p1 / N,
        (2,): p2 / N,
        (1, 1): norm(2 * e2, 2),
        (3,): p3 / N,
        (2, 1): norm(p1 * p2 - p3, 2),
        (1, 1, 1): norm(6 * e3, 3),
        (4,): p4 / N,
        (3, 1): norm(p3 * p1 - p4, 2),
        (2, 2): norm(p2 * p2 - p4, 2),
        (2, 1, 1): norm(2 * e2 * p2 - 2 * p3 * p1 + 2 * p4, 3),
        (1, 1, 1, 1): norm(24 * e4, 4),
    }


# (pattern, number of set partitions of p positions with that block shape)
_PARTITIONS = {
    1: [((1,), 1)],
    2: [((1, 1), 1), ((2,), 1)],
    3: [((1, 1, 1), 1), ((2, 1), 3), ((3,), 1)],
    4: [((1, 1, 1, 1), 1), ((2, 1, 1), 6), ((2, 2), 3), ((3, 1), 4), ((4,), 1)],
}


def sum_moments(x, n: int, with_replacement: bool) -> np.ndarray:
    """E[S^p], p = 1..4, for S the sum of n sampled data values.

    Terms whose multiplicity n(n-1)... vanishes are skipped, so small n or N
    never divides by zero.
    """
    table = index_moment_table(x, with_replacement)
    out = np.zeros(4)
    for p in range(1, 5):
        for pat, count in _PARTITIONS[p]:
            mult = _falling(n, len(pat))
            if mult:
                out[p - 1] += count * mult * table[pat]
    return out


def b_moments(model: GaussianConjugateModel, scheme: MinibatchScheme, central: bool = False) -> np.ndarray:
    """(E B, E B^2, E B^3, E B^4); ``central=True`` gives moments of B - E B."""
    N = model.N
    if N < 1:
        raise DegenerateDataError("B needs at least one data item")
    scheme.validate(N)
    x = np.asarray(model.data, dtype=float)
    if central:
        x = x - x.mean()
    n = scheme.n
    c = N / (2.0 * n * model.sigma_x_sq)
    return sum_moments(x, n, scheme.with_replacement) * c ** np.arange(1, 5)


def var_b(model: GaussianConjugateModel, scheme: MinibatchScheme) -> float:
    """Var(B), equal to ``toy_var_b`` but also defined for N = 1."""
    if scheme.is_full_batch(model.N):
        return 0.0
    return float(b_moments(model, scheme, central=True)[1])


# -- summary type ------------------------------------------------------------------


@dataclass(frozen=True)
class ToyAnalytic:
    A: float
    mu_p: float
    sigma_p_sq: float
    mean_b: float
    var_b: float
    power_sums: np.ndarray
    elementary: np.ndarray
    moment_table: dict

    @classmethod
    def build(cls, model: GaussianConjugateModel, scheme: MinibatchScheme) -> "ToyAnalytic":
        p = power_sums(model.data)
        return cls(
            A=model.A,
            mu_p=model.posterior_mean,
            sigma_p_sq=model.posterior_var,
            mean_b=float(b_moments(model, scheme)[0]),
            var_b=var_b(model, scheme),
            power_sums=p,
            elementary=elementary_symmetric(p),
            moment_table=index_moment_table(model.data, scheme.with_replacement),
        )


# -- chain coefficients ---------------------------------------------------------------


def _check_h(model, h, limit_factor=2.0):
    if not h > 0:
        raise DomainError(f"step size must be positive, got {h}")
    if h * model.A >= limit_factor:
        raise DomainError(f"h*A = {h * model.A:.6g} must be below {limit_factor}")


def noise_scale(model, scheme, h, method: str) -> float:
    method = _check_method(method)
    if method == "msgld":
        return math.sqrt(h) * (1.0 - 0.5 * h * var_b(model, scheme))
    return math.sqrt(h)


def _offset_central_moments(model, scheme, method):
    """Central moments (0, E D^2, E D^3, E D^4) of the offset, D = B - E B."""
    if method == "euler" or scheme.is_full_batch(model.N):
        return np.zeros(4)
    m = b_moments(model, scheme, central=True)
    m[0] = 0.0
    return m


def _innovation_moments(model, scheme, h, method) -> np.ndarray:
    """Moments 0..4 of c = h D + s xi, which has mean zero."""
    d = _offset_central_moments(model, scheme, method)
    s2 = noise_scale(model, scheme, h, method) ** 2
    k2, k3, k4 = d[1], d[2], d[3]
    return np.array([
        1.0,
        0.0,
        h**2 * k2 + s2,
        h**3 * k3,
        h**4 * k4 + 6 * h**2 * k2 * s2 + 3 * s2 * s2,
    ])


def _raw_innovation_moments(model, scheme, h, method) -> np.ndarray:
    """Moments 0..4 of h B + s xi (uncentred)."""
    if method == "euler" or scheme.is_full_batch(model.N):
        b = float(model.offsets.sum())
        eb = np.array([b, b**2, b**3, b**4])
    else:
        eb = b_moments(model, scheme)
    s2 = noise_scale(model, scheme, h, method) ** 2
    return np.array([
        1.0,
        h * eb[0],
        h**2 * eb[1] + s2,
        h**3 * eb[2] + 3 * h * eb[0] * s2,
        h**4 * eb[3] + 6 * h**2 * eb[1] * s2 + 3 * s2 * s2,
    ])


def _moment_step(m, a, c):
    """Moments of a X + C for X, C independent; m and c hold orders 0..4."""
    out = np.empty(5)
    for p in range(5):
        out[p] = sum(comb(p, k) * a**k * m[k] * c[p - k] for k in range(p + 1))
    return out


# -- moment trajectory ---------------------------------------------------------------------


@dataclass
class MomentTrajectory:
    """``moments[j, p-1] = E[theta_j^p]`` for j = 0..M-1 and p = 1..4."""

    moments: np.ndarray
    stable: bool

    def __len__(self):
        return self.moments.shape[0]

    def mean(self) -> np.ndarray:
        return self.moments[:, 0]

    def second(self) -> np.ndarray:
        return self.moments[:, 1]


def moment_trajectory(model, scheme, h, M, theta0=0.0, method: str = "sgld") -> MomentTrajectory:
    """Exact E[theta_j^p], starting from the deterministic state theta_0."""
    method = _check_method(method)
    if M < 0:
        raise ValueError("M must be non-negative")
    if not h > 0:
        raise DomainError("step size must be positive")
    stable = h * model.A < 1.0
    out = np.zeros((int(M), 4))
    if M == 0:
        return MomentTrajectory(out, stable)
    a = 1.0 - model.A * h
    c = _raw_innovation_moments(model, scheme, h, method)
    m = float(theta0) ** np.arange(5)
    for j in range(int(M)):
        out[j] = m[1:]
        m = _moment_step(m, a, c)
    return MomentTrajectory(out, stable)


# -- asymptotic formulas -----------------------------------------------------------------------


def asymptotic_var_euler(model, h) -> float:
    _check_h(model, h)
    A = model.A
    return 1.0 / (2 * A - A * A * h)


def asymptotic_var_sgld(model, scheme, h) -> float:
    _check_h(model, h)
    A = model.A
    return (1.0 + h * var_b(model, scheme)) / (2 * A - A * A * h)


def asymptotic_var_msgld(model, scheme, h) -> float:
    _check_h(model, h)
    A = model.A
    v = var_b(model, scheme)
    return (1.0 + h * h * v * v / 4.0) / (2 * A - A * A * h)


def asymptotic_var(model, scheme, h, method: str) -> float:
    method = _check_method(method)
    if method == "euler":
        return asymptotic_var_euler(model, h)
    if method == "sgld":
        return asymptotic_var_sgld(model, scheme, h)
    return asymptotic_var_msgld(model, scheme, h)


def asymptotic_mean(model, scheme, h, method: str = "sgld") -> float:
    """E[B]/A, which is the posterior mean for every method and every h."""
    _check_h(model, h)
    _check_method(method)
    return float(b_moments(model, scheme)[0]) / model.A if model.N else 0.0


def asymptotic_bias_second_moment(model, scheme, h, method: str) -> float:
    """Limit of E[theta_k^2] minus the posterior second moment."""
    return asymptotic_var(model, scheme, h, method) - model.posterior_var


def excess_bias_leading_sgld(model, scheme, h) -> float:
    """Leading-order excess bias of SGLD over Euler, h Var(B) / (2A)."""
    return h * var_b(model, scheme) / (2.0 * model.A)


def ou_euler_stationary_variance(sigma_sq: float, h: float) -> float:
    """Stationary variance of the Euler chain for N(mu, sigma_sq) targets."""
    if not sigma_sq > 0:
        raise DomainError("variance must be positive")
    if not h > 0:
        raise DomainError("step size must be positive")
    if h >= 4.0 * sigma_sq:
        raise DomainError(f"h = {h} must be below 4 sigma^2 = {4 * sigma_sq}")
    return sigma_sq / (1.0 - h / (4.0 * sigma_sq))


# -- exact MSE of the sample average of theta^2 ----------------------------------------------------

# State layout for the linear moment system; every entry is an expectation.
#  0: 1           1-4: E v^k         5: E V    6: E[v V]   7: E[v^2 V]
#  8: Q = sum E Y_j^2                9: P = sum E[Y_j V_{j-1}]
# 10: E U         11: E[v U]         12: R = sum E[v_j U_{j-1}]
# 13: S = sum E v_j^2
# with v = theta - mu_p, Y = theta^2 - (mu_p^2 + sigma_p^2), V and U running
# sums of Y and v.
_DIM = 14


def _transition(a, c, mu, sp2) -> np.ndarray:
    """One step of the linear system: advance the chain, then accumulate."""
    adv = np.zeros((_DIM, _DIM))
    adv[0, 0] = 1.0
    for p in range(1, 5):
        for k in range(p + 1):
            col = 0 if k == 0 else k
            adv[p, col] += comb(p, k) * a**k * c[p - k]
    # E[v' V] = a E[v V] + c1 E V ; E[v'^2 V] = a^2 E[v^2 V] + 2 a c1 E[v V] + c2 E V
    adv[5, 5] = 1.0
    adv[6, 6] = a
    adv[6, 5] = c[1]
    adv[7, 7] = a * a
    adv[7, 6] = 2 * a * c[1]
    adv[7, 5] = c[2]
    for i in (8, 9, 12, 13):
        adv[i, i] = 1.0
    adv[10, 10] = 1.0
    adv[11, 11] = a
    adv[11, 10] = c[1]

    acc = np.eye(_DIM)
    # Y = v^2 + 2 mu v - sp2 ; Y^2 expanded in powers of v
    y = np.zeros(_DIM)
    y[2], y[1], y[0] = 1.0, 2 * mu, -sp2
    y2 = np.zeros(_DIM)
    y2[4] = 1.0
    y2[3] = 4 * mu
    y2[2] = 4 * mu * mu - 2 * sp2
    y2[1] = -4 * mu * sp2
    y2[0] = sp2 * sp2
    acc[8] += y2
    # E[Y V] = E[v^2 V] + 2 mu E[v V] - sp2 E V
    acc[9, 7] += 1.0
    acc[9, 6] += 2 * mu
    acc[9, 5] += -sp2
    acc[5] += y
    # E[v V_new] = E[v V] + E[v Y] ; v Y = v^3 + 2 mu v^2 - sp2 v
    acc[6, 3] += 1.0
    acc[6, 2] += 2 * mu
    acc[6, 1] += -sp2
    acc[7, 4] += 1.0
    acc[7, 3] += 2 * mu
    acc[7, 2] += -sp2
    acc[12, 11] += 1.0
    acc[10, 1] += 1.0
    acc[11, 2] += 1.0
    acc[13, 2] += 1.0
    return acc @ adv


@dataclass(frozen=True)
class SampleAverageMoments:
    """Exact functionals of theta_1..theta_M for the sample-average estimators."""

    M: int
    mse2: float
    mean_s2: float
    ere: float
    state: np.ndarray


def sample_average_moments(model, scheme, h, M, theta0=0.0, method: str = "sgld") -> SampleAverageMoments:
    method = _check_method(method)
    if int(M) != M or M < 1:
        raise ValueError("M must be a positive integer")
    _check_h(model, h)
    mu, sp2 = model.posterior_mean, model.posterior_var
    a = 1.0 - model.A * h
    c = _innovation_moments(model, scheme, h, method)
    T = _transition(a, c, mu, sp2)
    z = np.zeros(_DIM)
    v0 = float(theta0) - mu
    z[:5] = v0 ** np.arange(5)
    z = np.linalg.matrix_power(T, int(M)) @ z
    M = int(M)
    mse = (z[8] + 2 * z[9]) / M**2
    mean_s2 = mu * mu + sp2 + z[5] / M
    within_var = z[13] / M - (z[13] + 2 * z[12]) / M**2
    return SampleAverageMoments(M, float(mse), float(mean_s2), float(within_var / sp2 - 1.0), z)


class MseSequence:
    """MSE of the theta^2 average as a function of M for one chain setup.

    Powers T^(2^k) of the transition are cached, so ``smallest_steps`` costs
    one matrix-vector product per bit of the answer.
    """

    def __init__(self, model, scheme, h, theta0=0.0, method: str = "sgld", max_bits: int = 60):
        method = _check_method(method)
        _check_h(model, h)
        self.mu, self.sp2 = model.posterior_mean, model.posterior_var
        c = _innovation_moments(model, scheme, h, method)
        T = _transition(1.0 - model.A * h, c, self.mu, self.sp2)
        self.powers = [T]
        for _ in range(max_bits - 1):
            self.powers.append(self.powers[-1] @ self.powers[-1])
        z = np.zeros(_DIM)
        z[:5] = (float(theta0) - self.mu) ** np.arange(5)
        self.z0 = z

    def state(self, M: int) -> np.ndarray:
        z = self.z0
        k = 0
        while M:
            if M & 1:
                z = self.powers[k] @ z
            M >>= 1
            k += 1
        return z

    @staticmethod
    def _mse(z, M) -> float:
        return float((z[8] + 2 * z[9]) / M**2)

    def mse(self, M: int) -> float:
        return self._mse(self.state(int(M)), int(M))

    def smallest_steps(self, target: float, M_max: float) -> int | None:
        """Smallest M with MSE(M) <= target, assuming MSE stays below target
        once it first gets there; None if that M exceeds ``M_max``."""
        if self.mse(1) <= target:
            return 1
        # binary lifting: largest M whose MSE is still above target
        M, z = 0, self.z0
        for k in range(len(self.powers) - 1, -1, -1):
            M2 = M + (1 << k)
            if M2 > M_max:
                continue
            z2 = self.powers[k] @ z
            if self._mse(z2, M2) > target:
                M, z = M2, z2
        return M + 1 if M + 1 <= M_max else None


def analytic_mse2(model, scheme, h, M, theta0=0.0, method: str = "sgld") -> float:
    """Exact E[((1/M) sum theta_j^2 - (mu_p^2 + sigma_p^2))^2], j = 1..M.

    Cost is O(log M) through repeated squaring of a 14 x 14 transition.
    """
    return sample_average_moments(model, scheme, h, M, theta0, method).mse2


def analytic_mse2_msgld(model, scheme, h, M, theta0=0.0) -> float:
    return analytic_mse2(model, scheme, h, M, theta0, "msgld")


def analytic_ere(model, scheme, h, M, theta0=0.0, method: str = "sgld") -> float:
    """Exact expected relative error of the within-chain variance estimate."""
    return sample_average_moments(model, scheme, h, M, theta0, method).ere


def mse2_double_sum(model, scheme, h, M, theta0=0.0, method: str = "sgld") -> float:
    """O(M^2) evaluation of the same MSE from pairwise moments E[theta_i^2 theta_j^2]."""
    method = _check_method(method)
    traj = moment_trajectory(model, scheme, h, M + 1, theta0, method).moments[1:]
    a = 1.0 - model.A * h
    c = _raw_innovation_moments(model, scheme, h, method)
    mean_c, var_c = c[1], c[2] - c[1] ** 2
    t = model.posterior_mean**2 + model.posterior_var
    total = 0.0
    for i in range(M):
        m1, m2, m3, m4 = traj[i]
        total += m4
        for j in range(i + 1, M):
            d = j - i
            ad = a**d
            # theta_j = a^d theta_i + W with W independent of theta_i
            if abs(1.0 - a) < 1e-12:
                ew, vw = d * mean_c, d * var_c
            else:
                ew = mean_c * (1.0 - ad) / (1.0 - a)
                vw = var_c * (1.0 - ad * ad) / (1.0 - a * a)
            ew2 = vw + ew * ew
            total += 2 * (ad * ad * m4 + 2 * ad * m3 * ew + m2 * ew2)
    s2 = traj[:, 1].sum()
    return float(total / M**2 - 2 * t * s2 / M + t * t)


# -- bias coefficient fits --------------------------------------------------------------------


@dataclass(frozen=True)
class BiasFit:
    order: float
    coefficient: float  # |lambda|: leading coefficient magnitude
    signed_coefficient: float
    loglog_prefactor: float
    r_squared: float
    n_points: int


def fit_bias_coefficient(hs, biases) -> BiasFit:
    """Order p and leading coefficient c of bias(h) = c h^p + O(h^{p+1}).

    p is the slope of log|bias| against log h.  The coefficient is the
    intercept of a straight-line fit of bias / h^round(p) against h, which
    removes the next-order term that otherwise inflates a pure log-log
    prefactor.
    """
    hs = np.asarray(hs, dtype=float)
    b = np.asarray(biases, dtype=float)
    keep = (hs > 0) & (b != 0) & np.isfinite(b)
    hs, b = hs[keep], b[keep]
    if np.unique(hs).size < 3:
        raise ValueError("need at least three distinct step sizes with non-zero bias")
    lx, ly = np.log(hs), np.log(np.abs(b))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    p = max(int(round(slope)), 1)
    coef = np.polyfit(hs, b / hs**p, 1)[1]
    return BiasFit(float(slope), float(abs(coef)), float(coef), float(math.exp(icpt)), float(r2), int(hs.size))


def richardson_ratio(f, h: float) -> float:
    """f(h) / f(h/2); 2**p for a quantity of leading order h^p."""
    return f(h) / f(h / 2.0)
