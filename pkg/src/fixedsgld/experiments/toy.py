"""Experiments on the conjugate Gaussian model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import toy_analytic as ta
from ..estimators import estimate_mse, fit_power_law
from ..gradients import MinibatchScheme
from ..models import GaussianConjugateModel
from ..rng import generator
from ..samplers import ChainSpec, make_kernel, run_linear_replicates
from .common import InfeasibleError, Timer, map_tasks, toy_model

_EXP_KEYS = {"bias-sweep": 1, "mse-sweep": 2, "cost-minimize": 3, "grow-n": 4}


def _scheme(n, mode, N) -> MinibatchScheme:
    return MinibatchScheme(min(int(n), N), mode)


def _expected_average_bias(model, scheme, h, K, burn_in, theta0, method) -> float:
    """Exact E[(1/(K-b)) sum_{k>b} theta_k^2] minus the posterior second moment."""
    t = model.posterior_mean**2 + model.posterior_var
    tot = K * ta.sample_average_moments(model, scheme, h, K, theta0, method).mean_s2
    if burn_in:
        tot -= burn_in * ta.sample_average_moments(model, scheme, h, burn_in, theta0, method).mean_s2
    return tot / (K - burn_in) - t


# -- bias sweep ------------------------------------------------------------------------------


def _bias_task(args):
    model, method, n, mode, r, i_n, i_r, cfg = args
    ch = cfg["chain"]
    N = model.N
    scheme = _scheme(n, mode, N)
    h = r / model.A
    theta0 = model.posterior_mean if ch["start"] == "posterior_mean" else ch["theta0"]
    K, b, R = ch["K"], ch["burn_in"], cfg["replicates"]
    t = model.posterior_mean**2 + model.posterior_var
    with Timer() as tm:
        analytic = ta.asymptotic_bias_second_moment(model, scheme, h, method)
        finite = _expected_average_bias(model, scheme, h, K, b, theta0, method)
        spec = ChainSpec(h, K, theta0, cfg["seed"], b)
        # the key omits the method so all methods share Gaussian increments
        rep = run_linear_replicates(make_kernel(method), model, scheme, spec, R,
                                    key=(_EXP_KEYS["bias-sweep"], i_n, i_r), stability="ignore")
        vals = rep.averages(2)[rep.ok] - t
    ok = vals.size
    emp = float(vals.mean()) if ok else float("nan")
    se = float(vals.std(ddof=1) / math.sqrt(ok)) if ok > 1 else float("nan")
    return {
        "method": method, "N": N, "n": scheme.n, "mode": mode, "r": r, "h": h, "K": K, "burn_in": b,
        "replicates": R, "bias_analytic": analytic, "bias_expected_finite": finite,
        "bias_empirical": emp, "bias_empirical_se": se,
        "agree_3se": bool(abs(emp - finite) <= 3 * se) if ok > 1 else False,
        "diverged": int((~rep.ok).sum()), "collapses": int(rep.collapses.sum()),
        "wall_time_s": tm.elapsed,
    }


BIAS_COLUMNS = ["method", "N", "n", "mode", "r", "h", "K", "burn_in", "replicates", "bias_analytic",
                "bias_expected_finite", "bias_empirical", "bias_empirical_se", "agree_3se", "diverged",
                "collapses", "wall_time_s"]


def bias_sweep(cfg: dict):
    model = toy_model(cfg["model"])
    g = cfg["grid"]
    tasks = [(model, m, n, g["mode"], r, i_n, i_r, cfg)
             for i_n, n in enumerate(g["n"]) for i_r, r in enumerate(g["r"]) for m in g["methods"]]
    rows = map_tasks(_bias_task, tasks, cfg["threads"])
    summary = {"experiment": "bias-sweep", "posterior_mean": model.posterior_mean,
               "posterior_var": model.posterior_var, "A": model.A,
               "agreement_fraction": float(np.mean([r["agree_3se"] for r in rows])),
               "orderings": _bias_orderings(rows)}
    return rows, BIAS_COLUMNS, summary


def _bias_orderings(rows):
    """Per (n, r): is Euler's |bias| lowest and is mSGLD below SGLD (analytic)?"""
    out = []
    by = {}
    for r in rows:
        by.setdefault((r["n"], r["r"]), {})[r["method"]] = abs(r["bias_analytic"])
    for (n, rr), d in sorted(by.items()):
        entry = {"n": n, "r": rr}
        if "euler" in d:
            entry["euler_lowest"] = all(d["euler"] <= v + 1e-15 for v in d.values())
        if "sgld" in d and "msgld" in d:
            entry["msgld_below_sgld"] = d["msgld"] <= d["sgld"] + 1e-15
        out.append(entry)
    return out


# -- MSE sweep ------------------------------------------------------------------------------------


def _mse_task(args):
    model, method, n, mode, r, Ms, key, cfg = args
    N = model.N
    scheme = _scheme(n, mode, N)
    h = r / model.A
    theta0 = cfg["chain"]["theta0"]
    R = cfg["replicates"]
    rows = []
    for i_m, M in enumerate(Ms):
        with Timer() as tm:
            res = ta.sample_average_moments(model, scheme, h, int(M), theta0, method)
            row = {"method": method, "N": N, "n": scheme.n, "mode": mode, "r": r, "h": h, "M": int(M),
                   "passes": int(M) * scheme.n / N, "mse_analytic": res.mse2, "ere_analytic": res.ere,
                   "mse_empirical": float("nan"), "mse_empirical_se": float("nan"),
                   "diverged": 0, "collapses": 0}
            if R >= 2 and M <= cfg["grid"]["mc_max_steps"]:
                t = model.posterior_mean**2 + model.posterior_var
                s = estimate_mse(make_kernel(method), model, scheme, ChainSpec(h, int(M), theta0, cfg["seed"]),
                                 phi=2, truth=t, R=R, seed=cfg["seed"], key=key + (i_m,), stability="ignore")
                row.update(mse_empirical=s.mse, mse_empirical_se=s.mse_se, diverged=s.n_diverged,
                           collapses=s.collapses)
        row["wall_time_s"] = tm.elapsed
        rows.append(row)
    return rows


MSE_COLUMNS = ["method", "N", "n", "mode", "r", "h", "M", "passes", "mse_analytic", "ere_analytic",
               "mse_empirical", "mse_empirical_se", "diverged", "collapses", "wall_time_s"]


def mse_sweep(cfg: dict):
    g = cfg["grid"]
    tasks = []
    if cfg["grow"]["enabled"]:
        for i_N, N in enumerate(cfg["grow"]["N"]):
            model = toy_model(cfg["model"], N=N)
            for i_e, beta in enumerate(cfg["grow"]["n_exponents"]):
                n = max(1, int(round(N**beta)))
                for m in g["methods"]:
                    if m == "euler":
                        continue
                    for i_r, r in enumerate(g["r"]):
                        tasks.append((model, m, n, g["mode"], r, g["M"],
                                      (_EXP_KEYS["mse-sweep"], 1, i_N, i_e, i_r), cfg))
            if "euler" in g["methods"]:
                for i_r, r in enumerate(g["r"]):
                    tasks.append((model, "euler", N, "without", r, g["M"],
                                  (_EXP_KEYS["mse-sweep"], 2, i_N, i_r), cfg))
    else:
        model = toy_model(cfg["model"])
        for i_n, n in enumerate(g["n"]):
            for i_r, r in enumerate(g["r"]):
                for m in g["methods"]:
                    if m == "euler" and i_n > 0:
                        continue  # Euler does not depend on n
                    nn = model.N if m == "euler" else n
                    tasks.append((model, m, nn, g["mode"], r, g["M"], (_EXP_KEYS["mse-sweep"], 0, i_n, i_r), cfg))
    rows = [row for chunk in map_tasks(_mse_task, tasks, cfg["threads"]) for row in chunk]
    emp = [r for r in rows if not math.isnan(r["mse_empirical"])]
    agree = [abs(r["mse_empirical"] - r["mse_analytic"]) <= 3 * r["mse_empirical_se"] for r in emp]
    summary = {"experiment": "mse-sweep", "rows": len(rows), "empirical_rows": len(emp),
               "agreement_fraction": float(np.mean(agree)) if agree else None}
    return rows, MSE_COLUMNS, summary


# -- cost minimisation -----------------------------------------------------------------------------


def smallest_steps(mse_of_m, target: float, M_max: float) -> int | None:
    """Smallest M with mse_of_m(M) <= target by doubling then bisection.

    Assumes the MSE is non-increasing in M past the first feasible point;
    returns None when no M up to M_max qualifies.
    """
    M = 1
    if mse_of_m(1) <= target:
        return 1
    while mse_of_m(M) > target:
        M *= 2
        if M > M_max:
            return None
    lo, hi = M // 2, M  # mse(lo) > target >= mse(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mse_of_m(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class CostPoint:
    n: int
    r: float
    M: int | None

    @property
    def cost(self) -> float:
        return float("inf") if self.M is None else float(self.M) * self.n


def _min_steps(model, scheme, r, eps, method, theta0, M_max) -> int | None:
    h = r / model.A
    target = eps * eps
    plateau = ta.asymptotic_bias_second_moment(model, scheme, h, method) ** 2
    if plateau >= target:
        return None
    bits = max(int(math.log2(M_max)) + 1, 1)
    return ta.MseSequence(model, scheme, h, theta0, method, max_bits=bits).smallest_steps(target, M_max)


def _best_r(model, scheme, eps, method, s, theta0) -> CostPoint:
    """Minimise M over r: log grid on [r_min, 1), then repeated zoom."""
    lo, hi = math.log(s["r_min"]), math.log(0.999)
    best = CostPoint(scheme.n, float("nan"), None)
    for _ in range(1 + s["refine_rounds"]):
        grid = np.exp(np.linspace(lo, hi, s["r_points"]))
        pts = [CostPoint(scheme.n, float(r), _min_steps(model, scheme, r, eps, method, theta0, s["M_max"]))
               for r in grid]
        i = min(range(len(pts)), key=lambda k: (pts[k].cost, pts[k].r))
        if pts[i].cost < best.cost or (pts[i].cost == best.cost and best.M is None):
            best = pts[i]
        if pts[i].M is None:
            break
        lo = math.log(grid[max(i - 1, 0)])
        hi = math.log(grid[min(i + 1, len(grid) - 1)])
    return best


def _cost_task(args):
    model, method, eps, cfg = args
    s = cfg["search"]
    N = model.N
    theta0 = cfg["chain"]["theta0"]
    with Timer() as tm:
        if method == "euler":
            n_grid = [N]
        else:
            n_grid = sorted({int(round(x)) for x in np.logspace(0, math.log10(N), s["n_points"])})
        best = CostPoint(0, float("nan"), None)
        for n in n_grid:
            mode = "without" if n == N else s["mode"]
            p = _best_r(model, MinibatchScheme(n, mode), eps, method, s, theta0)
            if p.cost < best.cost:
                best = p
    feasible = best.M is not None
    h = best.r / model.A if feasible else float("nan")
    mse = float("nan")
    if feasible:
        scheme = MinibatchScheme(best.n, "without" if best.n == N else s["mode"])
        mse = ta.analytic_mse2(model, scheme, h, best.M, theta0, method)
    return {"method": method, "eps": eps, "feasible": feasible, "n": best.n if feasible else 0,
            "r": best.r, "h": h, "M": best.M if feasible else 0, "cost": best.cost,
            "mse": mse, "wall_time_s": tm.elapsed}


COST_COLUMNS = ["method", "eps", "feasible", "n", "r", "h", "M", "cost", "mse", "wall_time_s"]


def cost_minimize(cfg: dict):
    model = toy_model(cfg["model"])
    s = cfg["search"]
    tasks = [(model, m, float(e), cfg) for m in s["methods"] for e in s["eps"]]
    rows = map_tasks(_cost_task, tasks, cfg["threads"])
    if not any(r["feasible"] for r in rows):
        raise InfeasibleError("no accuracy target is reachable on the search grid")
    summary = {"experiment": "cost-minimize", "N": model.N, "fits": {}, "n_sequences": {}}
    for m in s["methods"]:
        sel = sorted((r for r in rows if r["method"] == m and r["feasible"]), key=lambda r: -r["eps"])
        summary["n_sequences"][m] = [[r["eps"], r["n"]] for r in sel]
        sel = [r for r in sel if r["eps"] <= s["fit_eps_max"]]
        if len(sel) >= 3:
            eps = [r["eps"] for r in sel]
            fm = fit_power_law(eps, [r["M"] for r in sel])
            fr = fit_power_law(eps, [r["r"] for r in sel])
            fc = fit_power_law(eps, [r["cost"] for r in sel])
            summary["fits"][m] = {"M_exponent": fm.exponent, "r_exponent": fr.exponent,
                                  "cost_exponent": fc.exponent, "points": len(sel)}
    seqs = summary["n_sequences"]
    summary["properties"] = {}
    if len(seqs.get("sgld", [])) >= 2:
        summary["properties"]["sgld_n_grows"] = n_grows([n for _, n in seqs["sgld"]])
    if len(seqs.get("msgld", [])) >= 2:
        summary["properties"]["msgld_n_plateaus"] = n_plateaus([n for _, n in seqs["msgld"]])
    return rows, COST_COLUMNS, summary


def n_grows(ns) -> bool:
    """Optimal n, listed from the largest eps down, never shrinks and ends higher."""
    return bool(all(b >= a for a, b in zip(ns, ns[1:])) and ns[-1] > ns[0])


def n_plateaus(ns, tail: int = 4, spread: float = 4.0) -> bool:
    """The last ``tail`` optimal n values stay within a factor ``spread``."""
    t = ns[-tail:]
    return bool(len(t) >= 2 and max(t) <= spread * min(t))


# -- grow N -----------------------------------------------------------------------------------------


def _grow_configs(N: int, g: dict):
    eps = g["epsilon"]
    M = int(round(N ** (1 + 2 * eps)))
    # step sizes given through r are converted with each dataset's own A
    return [
        ("sgld", 1, {"h": N ** (-1 - eps)}, M, "mse"),
        ("euler", N, {"r": N ** (-eps)}, M, "mse"),
        ("sgld_ere", max(1, int(round(N ** g["ere_beta"]))), {"r": N ** (-g["ere_alpha"])},
         int(round(N ** g["ere_gamma"])), "ere"),
    ]


def _grow_task(args):
    N, cfg, i_N = args
    g, mc = cfg["grid"], cfg["model"]
    D = cfg["replicates"]
    theta0 = cfg["chain"]["theta0"]
    rows = []
    for name, n, step, M, target in _grow_configs(N, g):
        vals_mse, vals_ere = [], []
        with Timer() as tm:
            for d in range(D):
                rng = generator(cfg["seed"], _EXP_KEYS["grow-n"], i_N, d)
                data = mc["theta_true"] + math.sqrt(mc["sigma_x_sq"]) * rng.standard_normal(N)
                model = GaussianConjugateModel(mc["sigma_theta_sq"], mc["sigma_x_sq"], data)
                h = step["h"] if "h" in step else step["r"] / model.A
                method = "euler" if name == "euler" else "sgld"
                scheme = MinibatchScheme(n) if n < N else MinibatchScheme.full(N)
                res = ta.sample_average_moments(model, scheme, h, M, theta0, method)
                vals_mse.append(res.mse2)
                vals_ere.append(res.ere)
        vm, ve = np.array(vals_mse), np.array(vals_ere)
        rows.append({
            "config": name, "N": N, "n": n, "M": M, "cost": M * n,
            "h": step.get("h", float("nan")), "r": step.get("r", float("nan")), "datasets": D,
            "target": target, "mse_mean": vm.mean(), "mse_se": vm.std(ddof=1) / math.sqrt(D),
            "ere_mean": ve.mean(), "ere_se": ve.std(ddof=1) / math.sqrt(D), "wall_time_s": tm.elapsed,
        })
    return rows


GROW_COLUMNS = ["config", "N", "n", "M", "cost", "h", "r", "datasets", "target", "mse_mean", "mse_se",
                "ere_mean", "ere_se", "wall_time_s"]


def trend(values, increasing: bool = False) -> dict:
    """Least-squares slope over the grid index plus an endpoint comparison."""
    v = np.asarray(values, dtype=float)
    x = np.arange(v.size)
    slope = float(np.polyfit(x, v, 1)[0])
    ok = (v[-1] >= v[0] and slope >= 0) if increasing else (v[-1] < v[0] and slope < 0)
    return {"slope_per_grid_step": slope, "first": float(v[0]), "last": float(v[-1]), "holds": bool(ok)}


def grow_n(cfg: dict):
    Ns = [int(N) for N in cfg["grid"]["N"]]
    tasks = [(N, cfg, i) for i, N in enumerate(Ns)]
    rows = [row for chunk in map_tasks(_grow_task, tasks, cfg["threads"]) for row in chunk]
    summary = {"experiment": "grow-n", "checks": {}}
    for name, field, inc in (("sgld", "mse_mean", False), ("euler", "mse_mean", False),
                             ("sgld_ere", "ere_mean", True)):
        seq = [r[field] for r in rows if r["config"] == name]
        summary["checks"][name] = trend(seq, inc)
    return rows, GROW_COLUMNS, summary
