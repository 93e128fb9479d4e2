"""Compiled chain loops for one-dimensional linear-Gaussian models.

For the conjugate Gaussian model and the OU target the drift estimate is
``f_hat(theta) = -A theta + B`` with ``B = (N/n) sum_tau w_tau`` so a step needs
only the sampled offsets ``w``.  The loops below consume the minibatch and
noise generators exactly as the generic runner does (one ``random()`` per
index slot, one ``standard_normal()`` per step).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

EULER = 0
SGLD = 1
MSGLD = 2

REF_NONE = 0
REF_LINEAR = 1  # theta' = a theta + b + s xi


@njit(cache=True)
def _accumulate(sums, b, x):
    x2 = x * x
    sums[b, 0] += x
    sums[b, 1] += x2
    sums[b, 2] += x2 * x
    sums[b, 3] += x2 * x2


@njit(cache=True)
def _variance_scale(N, n, with_replacement):
    if n < 2:
        return 0.0
    if with_replacement:
        return N * N / (n * (n - 1.0))
    return N * (N - n) / (n * (n - 1.0))


@njit(cache=True)
def _draw_offset(w, n, with_replacement, need_var, rng_mb, buf):
    """Sampled offset B and, if asked, the unbiased estimate of Var(B)."""
    N = w.shape[0]
    s = 0.0
    s2 = 0.0
    if with_replacement:
        for i in range(n):
            v = w[int(rng_mb.random() * N)]
            s += v
            s2 += v * v
    else:
        for i in range(n):
            j = i + int(rng_mb.random() * (N - i))
            t = buf[i]
            buf[i] = buf[j]
            buf[j] = t
            v = w[buf[i]]
            s += v
            s2 += v * v
    var_b = 0.0
    if need_var:
        mean = s / n
        var_b = _variance_scale(N, n, with_replacement) * max(s2 - n * mean * mean, 0.0)
    return (N / n) * s, var_b


@njit(cache=True)
def _step(theta, A, w, b_full, full, n, with_replacement, method, h, sq_h, var_exact, estimate_var,
          rng_mb, rng_noise, buf):
    """One update; returns (theta', xi, collapsed)."""
    if method == EULER or full:
        B = b_full
        var_b = 0.0
    else:
        B, var_b = _draw_offset(w, n, with_replacement, method == MSGLD and estimate_var, rng_mb, buf)
        if method == MSGLD and not estimate_var:
            var_b = var_exact
    mult = 1.0
    collapsed = False
    if method == MSGLD:
        mult = 1.0 - 0.5 * h * var_b
        collapsed = mult <= 0.0
    xi = rng_noise.standard_normal()
    return theta + h * (B - A * theta) + sq_h * mult * xi, xi, collapsed


@njit(cache=True)
def linear_chain_kernel(
    theta0, A, w, n, with_replacement, method, h, var_exact, estimate_var,
    n_steps, burn_in, n_batches, rng_mb, rng_noise, buf,
    ref_kind, ref_a, ref_b, ref_s,
):
    N = w.shape[0]
    full = (not with_replacement) and n == N
    b_full = 0.0
    for i in range(N):
        b_full += w[i]
    sq_h = math.sqrt(h)
    sums = np.zeros((n_batches, 4))
    ref_sums = np.zeros((n_batches, 4))
    counts = np.zeros(n_batches, dtype=np.int64)
    n_rec = n_steps - burn_in
    theta = theta0
    theta_r = theta0
    collapses = 0
    diverged = -1
    for k in range(n_steps):
        theta, xi, col = _step(theta, A, w, b_full, full, n, with_replacement, method, h, sq_h,
                               var_exact, estimate_var, rng_mb, rng_noise, buf)
        collapses += col
        if ref_kind == REF_LINEAR:
            theta_r = ref_a * theta_r + ref_b + ref_s * xi
        if not math.isfinite(theta):
            diverged = k + 1
            break
        if k >= burn_in:
            b = ((k - burn_in) * n_batches) // n_rec
            counts[b] += 1
            _accumulate(sums, b, theta)
            if ref_kind != REF_NONE:
                _accumulate(ref_sums, b, theta_r)
    return sums, ref_sums, counts, theta, theta_r, collapses, diverged


@njit(cache=True)
def linear_replicates_kernel(
    theta0, A, w, n, with_replacement, method, h, var_exact, estimate_var,
    n_steps, burn_in, n_reps, rng_mb, rng_noise,
):
    """``n_reps`` chains run back to back on the same pair of streams.

    Returns per-replicate power sums over the recorded steps, collapse
    counts and the divergence step (-1 when finite throughout).  Every chain
    restarts from ``theta0`` with a fresh index buffer.
    """
    N = w.shape[0]
    full = (not with_replacement) and n == N
    b_full = 0.0
    for i in range(N):
        b_full += w[i]
    sq_h = math.sqrt(h)
    sums = np.zeros((n_reps, 4))
    collapses = np.zeros(n_reps, dtype=np.int64)
    diverged = np.full(n_reps, -1, dtype=np.int64)
    buf = np.empty(N, dtype=np.int64)
    for r in range(n_reps):
        for i in range(N):
            buf[i] = i
        theta = theta0
        for k in range(n_steps):
            theta, xi, col = _step(theta, A, w, b_full, full, n, with_replacement, method, h, sq_h,
                                   var_exact, estimate_var, rng_mb, rng_noise, buf)
            collapses[r] += col
            if not math.isfinite(theta):
                diverged[r] = k + 1
                break
            if k >= burn_in:
                _accumulate(sums, r, theta)
    return sums, collapses, diverged
