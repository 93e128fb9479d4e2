"""First-order bias of the Euler scheme on a Gaussian (OU) target.

Analytic path: exact stationary variance of the Euler chain.  Empirical
path: each Euler chain is coupled to an exact OU chain driven by the same
Gaussian increments; the difference of their theta^2 averages estimates the
bias with far less noise than either average alone.
"""

from __future__ import annotations

import math

import numpy as np

from .. import toy_analytic as ta
from ..estimators import batch_means_se
from ..models import OuProcess
from ..samplers import ChainSpec, Euler, run_linear_chain
from .common import Timer, map_tasks

_KEY = 6


def _empirical_task(args):
    ou, h, i_h, cfg = args
    e = cfg["empirical"]
    R = cfg["replicates"]
    vals, ses = [], []
    with Timer() as tm:
        for rep in range(R):
            spec = ChainSpec(h, e["K"], ou.mu, cfg["seed"], e["burn_in"])
            res = run_linear_chain(Euler(), ou, None, spec, key=(_KEY, i_h, rep), n_batches=e["batches"],
                                   reference="exact", stability="ignore")
            diff = res.batch_moments(2) - res.batch_moments(2, reference=True)
            vals.append(float(np.average(diff, weights=res.counts)))
            ses.append(batch_means_se(diff, res.counts))
    vals = np.array(vals)
    if R > 1:
        se = float(vals.std(ddof=1) / math.sqrt(R))
    else:
        se = ses[0]
    return {"path": "empirical", "h": h, "bias": float(vals.mean()), "bias_se": se,
            "bias_over_h": float(vals.mean()) / h, "steps": e["K"] * R, "wall_time_s": tm.elapsed}


COLUMNS = ["path", "h", "bias", "bias_se", "bias_over_h", "steps", "wall_time_s"]


def _ols_se(x, y_se) -> tuple[float, float]:
    """Standard errors of (intercept, slope) of a least-squares line through
    points with independent errors ``y_se``."""
    x = np.asarray(x, dtype=float)
    X = np.column_stack([np.ones_like(x), x])
    L = np.linalg.solve(X.T @ X, X.T)  # the fit is linear in y
    var = (L**2) @ np.asarray(y_se, dtype=float) ** 2
    return float(math.sqrt(var[0])), float(math.sqrt(var[1]))


def _fit_errors(hs, biases, ses) -> tuple[float, float]:
    """(coefficient se, order se) by error propagation through both fits."""
    hs, b, s = (np.asarray(v, dtype=float) for v in (hs, biases, ses))
    if not np.any(s > 0):
        return 0.0, 0.0
    coef_se, _ = _ols_se(hs, s / hs)
    _, order_se = _ols_se(np.log(hs), s / np.abs(b))
    return coef_se, order_se


def weak_order(cfg: dict):
    ou = OuProcess(cfg["ou"]["mu"], cfg["ou"]["sigma_sq"])
    s2 = ou.sigma_sq
    rows = []
    for h in cfg["analytic"]["h"]:
        with Timer() as tm:
            b = ta.ou_euler_stationary_variance(s2, h) - s2
        rows.append({"path": "analytic", "h": h, "bias": b, "bias_se": 0.0, "bias_over_h": b / h,
                     "steps": 0, "wall_time_s": tm.elapsed})
    tasks = [(ou, h, i, cfg) for i, h in enumerate(cfg["empirical"]["h"])]
    emp_rows = map_tasks(_empirical_task, tasks, cfg["threads"])
    rows += emp_rows

    an = [r for r in rows if r["path"] == "analytic"]
    fit_a = ta.fit_bias_coefficient([r["h"] for r in an], [r["bias"] for r in an])
    fit_e = ta.fit_bias_coefficient([r["h"] for r in emp_rows], [r["bias"] for r in emp_rows])
    errs = _fit_errors([r["h"] for r in emp_rows], [r["bias"] for r in emp_rows],
                       [r["bias_se"] for r in emp_rows])
    lo, hi = cfg["accept"]["low"], cfg["accept"]["high"]

    def pack(fit, se):
        cse, ose = se
        return {"coefficient": fit.coefficient, "signed_coefficient": fit.signed_coefficient,
                "coefficient_ci95": [fit.coefficient - 1.96 * cse, fit.coefficient + 1.96 * cse],
                "order": fit.order, "order_ci95": [fit.order - 1.96 * ose, fit.order + 1.96 * ose],
                "loglog_prefactor": fit.loglog_prefactor, "r_squared": fit.r_squared,
                "passes": bool(lo <= fit.coefficient <= hi)}

    summary = {"experiment": "weak-order", "sigma_sq": s2, "analytic": pack(fit_a, (0.0, 0.0)),
               "empirical": pack(fit_e, errs), "expected_coefficient": 0.25}
    return rows, COLUMNS, summary
