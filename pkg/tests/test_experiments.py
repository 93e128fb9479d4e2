import csv
import io
import json
import sys

import numpy as np
import pytest
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fixedsgld import cli
from fixedsgld.experiments import logistic as lg
from fixedsgld.experiments import toy
from fixedsgld.experiments.common import InfeasibleError, rows_to_csv, strip_timing, summary_path
from fixedsgld.experiments.config import ConfigError, defaults, dump_defaults, experiment_names, load_config

SMALL = {
    "bias-sweep": {
        "replicates": 3,
        "model": {"N": 50},
        "grid": {"methods": ["euler", "sgld", "msgld"], "n": [5], "r": [0.1, 0.3]},
        "chain": {"K": 4000},
    },
    "mse-sweep": {
        "replicates": 50,
        "model": {"N": 40},
        "grid": {"n": [2, 40], "r": [0.1], "M": [1, 10, 100], "mc_max_steps": 10},
    },
    "cost-minimize": {
        "model": {"N": 50},
        "search": {"eps": [1e-1, 3e-2, 1e-2, 3e-3], "n_points": 5, "r_points": 9, "refine_rounds": 1,
                   "fit_eps_max": 1e-1},
    },
    "grow-n": {"replicates": 3, "grid": {"N": [10, 30, 100]}},
    "logistic": {
        "replicates": 3,
        "data": {"N": 100, "d": 2, "beta_true": [1.0, 0.0]},
        "chain": {"K": 60, "n": [5, 20], "checkpoints": 4, "h": 0.01},
        "reference": {"steps": 6000, "burn_in": 500, "batches": 10},
    },
    "weak-order": {"empirical": {"h": [0.05, 0.1, 0.2], "K": 20000, "burn_in": 100, "batches": 10}},
}


def _write_cfg(tmp_path, name, extra=None):
    cfg = dict(SMALL[name])
    cfg.update(extra or {})
    p = tmp_path / f"{name}.toml"
    p.write_text(tomli_w.dumps(cfg))
    return p


def _run(name):
    return cli.RUNNERS[name](load_config(name, overrides=SMALL[name]))


class TestConfig:
    @pytest.mark.parametrize("name", experiment_names())
    def test_defaults_roundtrip(self, name):
        assert tomllib.loads(dump_defaults(name)) == defaults(name)

    @pytest.mark.parametrize("name", experiment_names())
    def test_defaults_valid(self, name):
        assert load_config(name) == defaults(name)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[grid]\nbogus = 1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config("bias-sweep", p)

    def test_wrong_type(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[grid]\nr = ["a"]\n')
        with pytest.raises(ConfigError):
            load_config("bias-sweep", p)

    def test_empty_grid(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[grid]\nr = []\n")
        with pytest.raises(ConfigError, match="empty"):
            load_config("bias-sweep", p)

    def test_int_promoted_to_float(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[model]\nsigma_x_sq = 2\n")
        cfg = load_config("bias-sweep", p)
        assert cfg["model"]["sigma_x_sq"] == 2.0 and isinstance(cfg["model"]["sigma_x_sq"], float)

    @pytest.mark.parametrize("over", [{"seed": -1}, {"seed": 2**64}, {"threads": 0}])
    def test_bad_top_level(self, over):
        with pytest.raises(ConfigError):
            load_config("mse-sweep", overrides=over)

    def test_bad_r(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[grid]\nr = [1.5]\n")
        with pytest.raises(ConfigError):
            load_config("mse-sweep", p)

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[grid\n")
        with pytest.raises(ConfigError):
            load_config("mse-sweep", p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config("mse-sweep", tmp_path / "nope.toml")

    def test_cov_convention_checked(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[chain]\nmsgld_cov = "hessian"\n')
        with pytest.raises(ConfigError):
            load_config("logistic", p)


class TestOutput:
    def test_csv_schema_and_quoting(self):
        text = rows_to_csv([{"a": 1, "b": "x,y", "c": float("nan")}, {"a": True, "b": 'q"t', "c": 0.1}],
                           ["a", "b", "c"])
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["schema_version", "a", "b", "c"]
        assert rows[1] == ["1", "1", "x,y", "nan"]
        assert rows[2] == ["1", "true", 'q"t', "0.1"]
        assert '"q""t"' in text

    def test_strip_timing(self):
        text = rows_to_csv([{"a": 1, "wall_time_s": 0.123}], ["a", "wall_time_s"])
        assert strip_timing(text) == "schema_version,a\n1,1\n"

    def test_summary_path(self):
        assert summary_path("run.csv") == "run.json"
        assert summary_path("out") == "out.json"
        assert summary_path(None) is None


class TestToyExperiments:
    def test_bias_sweep(self):
        rows, cols, summary = _run("bias-sweep")
        assert len(rows) == 6 and cols[-1] == "wall_time_s"
        assert summary["agreement_fraction"] >= 0.5
        for entry in summary["orderings"]:
            assert entry["euler_lowest"] and entry["msgld_below_sgld"]

    def test_mse_sweep_agreement(self):
        rows, _, summary = _run("mse-sweep")
        # Euler runs only once (it ignores n)
        assert len(rows) == 3 * 5
        assert summary["empirical_rows"] == 10
        assert summary["agreement_fraction"] >= 0.8

    def test_cost_minimize(self):
        rows, _, summary = _run("cost-minimize")
        assert all(r["feasible"] for r in rows)
        for r in rows:
            assert r["mse"] <= r["eps"] ** 2 * (1 + 1e-12)
            assert r["cost"] == r["M"] * r["n"]
        assert all(r["n"] == 50 for r in rows if r["method"] == "euler")
        assert set(summary["fits"]) == {"euler", "sgld", "msgld"}

    def test_cost_minimize_infeasible(self):
        cfg = load_config("cost-minimize")
        cfg["model"]["N"] = 20
        cfg["search"].update(eps=[1e-9], M_max=10.0, n_points=3, r_points=5, refine_rounds=0)
        with pytest.raises(InfeasibleError):
            toy.cost_minimize(cfg)

    def test_grow_n(self):
        rows, _, summary = _run("grow-n")
        assert len(rows) == 9
        assert set(summary["checks"]) == {"sgld", "euler", "sgld_ere"}

    def test_n_sequence_properties(self):
        assert toy.n_grows([1, 1, 5, 40])
        assert not toy.n_grows([1, 5, 3, 40])
        assert not toy.n_grows([4, 4, 4])
        assert toy.n_plateaus([200, 50, 2, 1, 1, 3])
        assert not toy.n_plateaus([1, 2, 10, 100])

    def test_trend(self):
        assert toy.trend([3.0, 2.0, 1.0])["holds"]
        assert toy.trend([1.0, 2.0, 2.5], increasing=True)["holds"]
        assert not toy.trend([1.0, 2.0])["holds"]


class TestWeakOrder:
    def test_analytic_fit(self):
        rows, _, summary = _run("weak-order")
        assert summary["analytic"]["coefficient"] == pytest.approx(0.25, abs=0.01)
        assert summary["analytic"]["passes"]
        assert len(rows) == 6


class TestLogistic:
    def test_checkpoints(self):
        assert lg.checkpoints(2000, 12)[-1] == 2000
        assert lg.checkpoints(10, 3) == [1, 3, 10]

    def test_rwm_scale(self):
        assert lg.rwm_scale(np.eye(4)) == pytest.approx(2.38 / 2)

    def test_small_run(self):
        rows, cols, summary = _run("logistic")
        assert cols == lg.COLUMNS
        assert {r["method"] for r in rows} == {"sgld", "msgld"}
        assert all(r["replicates"] == 3 for r in rows)
        ref = summary["reference"]
        assert all(lg.ACCEPT_BAND[0] <= a <= lg.ACCEPT_BAND[1] for a in ref["acceptance"])
        assert len(ref["mean"]) == 2

    def test_bad_minibatch(self):
        cfg = load_config("logistic")
        cfg["data"].update(N=30, d=2, beta_true=[1.0, 0.0])
        cfg["chain"]["n"] = [40]
        cfg["reference"].update(steps=2000, burn_in=100, batches=10)
        with pytest.raises(InfeasibleError):
            lg.logistic(cfg)


class TestDeterminism:
    @pytest.mark.parametrize("name", ["bias-sweep", "mse-sweep", "grow-n", "logistic"])
    def test_threads_do_not_change_output(self, tmp_path, name):
        p = _write_cfg(tmp_path, name)
        outs = []
        for threads in (1, 2, 1):
            out = tmp_path / f"{name}-{threads}-{len(outs)}.csv"
            assert cli.main([name, "--config", str(p), "--threads", str(threads), "--out", str(out)]) == 0
            outs.append(strip_timing(out.read_text()))
        assert outs[0] == outs[1] == outs[2]

    def test_seed_changes_output(self, tmp_path):
        p = _write_cfg(tmp_path, "bias-sweep")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["bias-sweep", "--config", str(p), "--out", str(a)])
        cli.main(["bias-sweep", "--config", str(p), "--seed", "5", "--out", str(b)])
        assert strip_timing(a.read_text()) != strip_timing(b.read_text())


class TestCli:
    def test_print_defaults(self, capsys):
        assert cli.main(["cost-minimize", "--print-defaults"]) == 0
        assert tomllib.loads(capsys.readouterr().out) == defaults("cost-minimize")

    def test_writes_csv_and_json(self, tmp_path):
        p = _write_cfg(tmp_path, "weak-order")
        out = tmp_path / "w.csv"
        assert cli.main(["weak-order", "--config", str(p), "--out", str(out)]) == 0
        assert out.read_text().startswith("schema_version,path,h,")
        assert json.loads((tmp_path / "w.json").read_text())["experiment"] == "weak-order"

    def test_stdout_and_stderr(self, tmp_path, capsys):
        p = _write_cfg(tmp_path, "grow-n")
        assert cli.main(["grow-n", "--config", str(p)]) == 0
        cap = capsys.readouterr()
        assert cap.out.startswith("schema_version,config,")
        assert json.loads(cap.err)["experiment"] == "grow-n"

    def test_config_error_exit(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text("nonsense = 1\n")
        assert cli.main(["grow-n", "--config", str(p)]) == 2
        assert cli.main(["grow-n", "--seed", "-1"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_infeasible_exit(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(tomli_w.dumps({"model": {"N": 20}, "search": {
            "eps": [1e-9], "M_max": 10.0, "n_points": 3, "r_points": 5, "refine_rounds": 0}}))
        assert cli.main(["cost-minimize", "--config", str(p), "--out", str(tmp_path / "x.csv")]) == 3

    def test_unwritable_output(self, tmp_path):
        p = _write_cfg(tmp_path, "grow-n")
        assert cli.main(["grow-n", "--config", str(p), "--out", str(tmp_path / "no" / "x.csv")]) == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["nope"])
