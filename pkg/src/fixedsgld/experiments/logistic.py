"""Bayesian logistic regression: MSE of the posterior-mean estimate.

The reference posterior mean comes from random-walk Metropolis started at
the MAP point, run twice on disjoint streams so the two estimates can be
checked against each other.  SGLD and mSGLD (estimated gradient covariance)
chains are then run from a common start and their running averages are
scored against the reference at a set of checkpoints.

``chain.msgld_cov`` selects the covariance in the mSGLD noise correction:
``"gradient"`` (default here) uses Cov of the full log-density gradient
estimate, ``"drift"`` the covariance of the drift f_hat, a quarter of it.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.optimize import minimize

from ..estimators import batch_means_se
from ..gradients import MinibatchScheme
from ..models import generate_logistic_data, load_logistic_csv, model_gradients
from ..samplers import MSGLD, RWM, SGLD, Chain, DivergenceError, RunningStats
from .common import InfeasibleError, Timer, map_tasks

_KEY_REF = 7
_KEY_CHAIN = 8

ACCEPT_BAND = (0.05, 0.70)


class ReferenceWarning(UserWarning):
    pass


def logistic_model(data_cfg: dict):
    if data_cfg.get("data_csv"):
        return load_logistic_csv(data_cfg["data_csv"])
    return generate_logistic_data(data_cfg["N"], data_cfg["d"], data_cfg["data_seed"], data_cfg["beta_true"])


def map_estimate(model):
    """Posterior mode and the inverse Hessian of -log density there."""
    def nll(b):
        return -model.log_density(b)

    def grad(b):
        g0, gl = model_gradients(model, b)
        return -(g0 + gl.sum(axis=0))

    res = minimize(nll, np.zeros(model.dim), jac=grad, method="BFGS", options={"gtol": 1e-10})
    beta = res.x
    x = model.covariates
    p = 1.0 / (1.0 + np.exp(-(x @ beta)))
    H = model.prior_precision + (x * (p * (1 - p))[:, None]).T @ x
    return beta, np.linalg.inv(H)


def rwm_scale(cov) -> float:
    """Isotropic proposal scale 2.38/sqrt(d) times the typical posterior sd."""
    d = cov.shape[0]
    return 2.38 / math.sqrt(d) * math.sqrt(float(np.mean(np.diag(cov))))


def reference_mean(model, cfg: dict) -> dict:
    ref = cfg["reference"]
    beta_map, cov = map_estimate(model)
    scale = ref["scale"] if ref["scale"] > 0 else rwm_scale(cov)
    runs = []
    for i in range(ref["runs"]):
        chain = Chain(RWM(scale), model, None, beta_map, 1.0, cfg["seed"], (_KEY_REF, i))
        chain.advance(ref["burn_in"])
        B = ref["batches"]
        size = (ref["steps"] - ref["burn_in"]) // B
        means = []
        for _ in range(B):
            means.append(chain.advance(size, RunningStats(model.dim, max_power=1)).stats.mean())
        means = np.array(means)
        se = np.array([batch_means_se(means[:, j]) for j in range(model.dim)])
        rate = chain.accepted / chain.step_count
        runs.append({"mean": means.mean(axis=0), "se": se, "acceptance": rate})
        if not ACCEPT_BAND[0] <= rate <= ACCEPT_BAND[1]:
            warnings.warn(f"RWM reference run {i}: acceptance rate {rate:.3f} outside {ACCEPT_BAND} "
                          f"(scale {scale:.4g}, MAP {np.round(beta_map, 4).tolist()})", ReferenceWarning,
                          stacklevel=2)
    means = np.array([r["mean"] for r in runs])
    ses = np.array([r["se"] for r in runs])
    mean = means.mean(axis=0)
    se = np.sqrt((ses**2).sum(axis=0)) / len(runs)
    # largest pairwise gap in units of its standard error, over coordinates
    z = 0.0
    for a in range(len(runs)):
        for b in range(a + 1, len(runs)):
            z = max(z, float(np.max(np.abs(means[a] - means[b]) / np.sqrt(ses[a] ** 2 + ses[b] ** 2))))
    return {"mean": mean, "se": se, "map": beta_map, "scale": scale,
            "acceptance": [r["acceptance"] for r in runs], "run_means": means, "max_z": z,
            "consistent": bool(z <= 3.0)}


def checkpoints(K: int, count: int) -> list[int]:
    return sorted({int(round(x)) for x in np.geomspace(1, K, count)} | {K})


def _kernel(method: str, cov_of: str = "drift"):
    return SGLD() if method == "sgld" else MSGLD("estimated", cov_of)


def _chain_task(args):
    model, method, n, i_n, truth, cfg = args
    ch = cfg["chain"]
    R = cfg["replicates"]
    cps = checkpoints(ch["K"], ch["checkpoints"])
    mode = "without" if n == model.N else ch["mode"]
    scheme = MinibatchScheme(n, mode)
    theta0 = np.zeros(model.dim) if ch["start"] == "zero" else cfg["_map"]
    sq = np.full((R, len(cps)), np.nan)
    diverged = collapses = 0
    with Timer() as tm:
        for rep in range(R):
            # same key across methods: both see the same minibatches and noise
            chain = Chain(_kernel(method, ch["msgld_cov"]), model, scheme, theta0, ch["h"], cfg["seed"],
                          (_KEY_CHAIN, i_n, rep))
            stats = RunningStats(model.dim, max_power=1)
            done = 0
            try:
                for j, c in enumerate(cps):
                    chain.advance(c - done, stats)
                    done = c
                    sq[rep, j] = float(np.sum((stats.mean() - truth) ** 2))
            except DivergenceError:
                diverged += 1
                sq[rep] = np.nan
            collapses += chain.collapses
    ok = ~np.isnan(sq[:, 0])
    rows = []
    per_cp = tm.elapsed / len(cps)
    for j, c in enumerate(cps):
        v = sq[ok, j]
        mse = float(v.mean()) if v.size else float("nan")
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        rows.append({"method": method, "n": n, "steps": c, "passes": c * n / model.N, "mse": mse,
                     "mse_se": se, "replicates": int(ok.sum()), "diverged": diverged,
                     "collapses": collapses, "wall_time_s": per_cp})
    return rows


COLUMNS = ["method", "n", "steps", "passes", "mse", "mse_se", "replicates", "diverged", "collapses",
           "wall_time_s"]


def _orderings(rows, ns, K) -> dict:
    final = {(r["method"], r["n"]): r["mse"] for r in rows if r["steps"] == K}
    out: dict = {}
    sg = [final[("sgld", n)] for n in sorted(ns) if ("sgld", n) in final]
    if len(sg) >= 2:
        out["sgld_decreasing_in_n"] = bool(all(a > b for a, b in zip(sg, sg[1:])))
    out["msgld_beats_sgld"] = {str(n): bool(final[("msgld", n)] < final[("sgld", n)])
                               for n in sorted(ns) if ("msgld", n) in final and ("sgld", n) in final}
    # smallest MSE reached anywhere along each mSGLD curve
    out["msgld_min_mse"] = {str(n): min(r["mse"] for r in rows if r["method"] == "msgld" and r["n"] == n)
                            for n in sorted(ns) if ("msgld", n) in final}
    return out


def logistic(cfg: dict):
    model = logistic_model(cfg["data"])
    with Timer() as tm:
        ref = reference_mean(model, cfg)
    cfg = dict(cfg, _map=ref["map"])
    ch = cfg["chain"]
    ns = [int(n) for n in ch["n"]]
    for n in ns:
        if not 1 <= n <= model.N:
            raise InfeasibleError(f"minibatch size {n} outside 1..{model.N}")
        if "msgld" in ch["methods"] and n < 2:
            raise InfeasibleError("mSGLD with an estimated covariance needs n >= 2")
    tasks = [(model, m, n, i, ref["mean"], cfg) for m in ch["methods"] for i, n in enumerate(ns)]
    rows = [r for block in map_tasks(_chain_task, tasks, cfg["threads"]) for r in block]
    if all(r["replicates"] == 0 for r in rows):
        raise InfeasibleError("every chain diverged")
    summary = {
        "experiment": "logistic", "N": model.N, "d": model.dim, "h": ch["h"], "K": ch["K"],
        "reference": {"mean": ref["mean"], "se": ref["se"], "map": ref["map"], "scale": ref["scale"],
                      "acceptance": ref["acceptance"], "run_means": ref["run_means"],
                      "max_z": ref["max_z"], "consistent": ref["consistent"], "wall_time_s": tm.elapsed},
        "orderings": _orderings(rows, ns, ch["K"]),
    }
    return rows, COLUMNS, summary
