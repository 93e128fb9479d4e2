"""TOML experiment configuration with schema validation.

Each experiment has a table of defaults (see ``DEFAULTS``).  A config file
may override any subset of keys; unknown keys, wrong types and empty grids
are errors.  ``seed``, ``replicates`` and ``threads`` live at top level so
the matching command-line flags can override them.
"""

from __future__ import annotations

import copy
import math
import sys

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..toy_analytic import METHODS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_TOY_MODEL = {
    "N": 1000,
    "sigma_theta_sq": 1.0,
    "sigma_x_sq": 1.0,
    "theta_true": 1.0,
    "data_seed": 1,
    "data_csv": "",
}

DEFAULTS: dict[str, dict] = {
    "bias-sweep": {
        "seed": 2017,
        "replicates": 4,
        "threads": 1,
        "model": dict(_TOY_MODEL),
        "grid": {
            "methods": ["euler", "sgld", "msgld"],
            "n": [10, 200, 1000],
            "mode": "without",
            "r": [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4],
        },
        "chain": {"K": 200000, "burn_in": 0, "start": "posterior_mean", "theta0": 0.0},
    },
    "mse-sweep": {
        "seed": 2017,
        "replicates": 0,
        "threads": 1,
        "model": dict(_TOY_MODEL),
        "grid": {
            "methods": ["euler", "sgld", "msgld"],
            "n": [1, 10, 100, 1000],
            "mode": "without",
            "r": [0.05],
            "M": [1, 10, 100, 1000, 10000, 100000, 1000000],
            "mc_max_steps": 1000,
        },
        "grow": {"enabled": False, "N": [100, 1000, 10000], "n_exponents": [0.1, 0.5, 0.9]},
        "chain": {"theta0": 0.0},
    },
    "cost-minimize": {
        "seed": 2017,
        "replicates": 0,
        "threads": 1,
        "model": dict(_TOY_MODEL),
        "search": {
            "methods": ["euler", "sgld", "msgld"],
            "eps": [3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6],
            "mode": "without",
            "n_points": 31,
            "r_points": 25,
            "r_min": 1e-4,
            "refine_rounds": 3,
            "M_max": 1e14,
            # power-law fits only use the small-eps end, where the scaling is asymptotic
            "fit_eps_max": 3e-4,
        },
        "chain": {"theta0": 0.0},
    },
    "grow-n": {
        "seed": 2017,
        "replicates": 20,
        "threads": 1,
        "model": {"sigma_theta_sq": 1.0, "sigma_x_sq": 1.0, "theta_true": 1.0},
        "grid": {
            "N": [10, 30, 100, 300, 1000, 3000],
            "epsilon": 0.1,
            "ere_alpha": 0.25,
            "ere_beta": 0.5,
            "ere_gamma": 1.5,
        },
        "chain": {"theta0": 0.0},
    },
    "logistic": {
        "seed": 2017,
        "replicates": 100,
        "threads": 1,
        "data": {"N": 1000, "d": 3, "beta_true": [1.0, 0.0, 0.0], "data_seed": 1, "data_csv": ""},
        "chain": {
            "h": 0.002,
            "K": 2000,
            "n": [10, 50, 150],
            "methods": ["sgld", "msgld"],
            "mode": "without",
            "checkpoints": 12,
            "start": "zero",
            "msgld_cov": "gradient",
        },
        "reference": {"steps": 200000, "runs": 2, "burn_in": 5000, "scale": 0.0, "batches": 50},
    },
    "weak-order": {
        "seed": 2017,
        "replicates": 4,
        "threads": 1,
        "ou": {"mu": 0.0, "sigma_sq": 1.0},
        "analytic": {"h": [0.02, 0.04, 0.08]},
        "empirical": {"h": [0.02, 0.05, 0.1], "K": 5000000, "burn_in": 1000, "batches": 50},
        "accept": {"low": 0.23, "high": 0.27},
    },
}


def experiment_names() -> list[str]:
    return list(DEFAULTS)


def defaults(name: str) -> dict:
    if name not in DEFAULTS:
        raise ConfigError(f"unknown experiment {name!r}")
    return copy.deepcopy(DEFAULTS[name])


def dump_defaults(name: str) -> str:
    return tomli_w.dumps(defaults(name))


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    return False


def _merge(base: dict, override: dict, path: str) -> None:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        d = base[k]
        if isinstance(d, dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a table")
            _merge(d, v, where + ".")
        elif isinstance(d, list):
            if not isinstance(v, list):
                raise ConfigError(f"{where!r} must be a list")
            if not v:
                raise ConfigError(f"{where!r} must not be empty")
            if not all(_type_ok(d[0], x) for x in v):
                raise ConfigError(f"{where!r}: elements must be {type(d[0]).__name__}")
            base[k] = [float(x) if isinstance(d[0], float) else x for x in v]
        else:
            if not _type_ok(d, v):
                raise ConfigError(f"{where!r} must be {type(d).__name__}, got {v!r}")
            base[k] = float(v) if isinstance(d, float) else v


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(name: str, cfg: dict) -> None:
    _check(0 <= cfg["seed"] < 2**64, "seed must be an unsigned 64-bit integer")
    _check(cfg["threads"] >= 1, "threads must be at least 1")
    _check(cfg["replicates"] >= 0, "replicates must be non-negative")
    for sec in ("grid", "search", "chain"):
        tbl = cfg.get(sec, {})
        if "methods" in tbl:
            allowed = METHODS if name != "logistic" else ("euler", "sgld", "msgld")
            bad = [m for m in tbl["methods"] if m not in allowed]
            _check(not bad, f"unknown methods {bad}")
        if "mode" in tbl:
            _check(tbl["mode"] in ("with", "without"), "mode must be 'with' or 'without'")
        if "r" in tbl:
            _check(all(0 < r < 1 for r in tbl["r"]), "r values must lie in (0, 1)")
        for key in ("n", "M", "N"):
            if key in tbl and isinstance(tbl[key], list):
                _check(all(x >= 1 for x in tbl[key]), f"{sec}.{key} values must be positive")
    if "model" in cfg and "N" in cfg["model"]:
        _check(cfg["model"]["N"] >= 2, "model.N must be at least 2")
    for sec in cfg.values():
        if isinstance(sec, dict):
            for k, v in sec.items():
                if k in ("sigma_theta_sq", "sigma_x_sq", "sigma_sq", "h"):
                    vals = v if isinstance(v, list) else [v]
                    _check(all(x > 0 and math.isfinite(x) for x in vals), f"{k} must be positive")
    if name == "bias-sweep":
        ch = cfg["chain"]
        _check(ch["start"] in ("posterior_mean", "value"), "chain.start must be 'posterior_mean' or 'value'")
        _check(0 <= ch["burn_in"] < ch["K"], "need 0 <= burn_in < K")
        _check(cfg["replicates"] >= 2, "bias-sweep needs at least two replicates")
    if name == "cost-minimize":
        s = cfg["search"]
        _check(all(e > 0 for e in s["eps"]), "eps values must be positive")
        _check(0 < s["r_min"] < 1, "r_min must lie in (0, 1)")
        _check(s["fit_eps_max"] > 0, "fit_eps_max must be positive")
        _check(s["M_max"] >= 1, "M_max must be at least 1")
        _check(s["n_points"] >= 1 and s["r_points"] >= 3, "grid densities too small")
    if name == "logistic":
        ch, data = cfg["chain"], cfg["data"]
        _check(len(data["beta_true"]) == data["d"], "beta_true must have length d")
        _check(ch["start"] in ("zero", "map"), "chain.start must be 'zero' or 'map'")
        _check(ch["msgld_cov"] in ("drift", "gradient"), "chain.msgld_cov must be 'drift' or 'gradient'")
        _check(ch["K"] >= 1 and ch["checkpoints"] >= 1, "K and checkpoints must be positive")
        _check(cfg["reference"]["runs"] >= 2, "reference.runs must be at least 2")
        _check(cfg["reference"]["burn_in"] < cfg["reference"]["steps"], "reference burn-in too long")
    if name == "weak-order":
        e = cfg["empirical"]
        _check(0 <= e["burn_in"] < e["K"], "need 0 <= burn_in < K")
        _check(len(cfg["analytic"]["h"]) >= 3, "analytic fit needs three step sizes")
    if name == "grow-n":
        _check(cfg["replicates"] >= 2, "grow-n needs at least two datasets (replicates)")


def load_config(name: str, path=None, overrides: dict | None = None) -> dict:
    cfg = defaults(name)
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _merge(cfg, data, "")
    if overrides:
        _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "")
    _validate(name, cfg)
    return cfg
