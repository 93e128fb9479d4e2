"""Shared plumbing: model construction, grid dispatch and output sinks."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

from ..models import GaussianConjugateModel, generate_toy_data, load_toy_csv
from .config import SCHEMA_VERSION

TIMING_COLUMNS = ("wall_time_s",)


class InfeasibleError(RuntimeError):
    """Raised when nothing in the grid can be satisfied or every run diverged."""


def toy_model(model_cfg: dict, N: int | None = None, data_key: int = 0) -> GaussianConjugateModel:
    if model_cfg.get("data_csv"):
        data = load_toy_csv(model_cfg["data_csv"])
    else:
        N = int(N if N is not None else model_cfg["N"])
        data = generate_toy_data(model_cfg["theta_true"], model_cfg["sigma_x_sq"], N,
                                 seed=model_cfg.get("data_seed", 1) + data_key)
    return GaussianConjugateModel(model_cfg["sigma_theta_sq"], model_cfg["sigma_x_sq"], data)


def map_tasks(fn: Callable, tasks: Sequence, threads: int = 1) -> list:
    """Apply ``fn`` to every task; results come back in task order.

    Each task carries its own seed key, so the results do not depend on the
    number of workers.
    """
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", *columns])
    for row in rows:
        w.writerow([SCHEMA_VERSION, *(_fmt(row.get(c, "")) for c in columns)])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    if path in (None, "", "-"):
        import sys

        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def to_json(summary: dict) -> str:
    return json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"


def summary_path(out) -> str | None:
    if out in (None, "", "-"):
        return None
    return str(out).rsplit(".", 1)[0] + ".json" if str(out).endswith(".csv") else str(out) + ".json"


def strip_timing(csv_text: str) -> str:
    """Drop timing columns, for reproducibility comparisons."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep])
    return buf.getvalue()
