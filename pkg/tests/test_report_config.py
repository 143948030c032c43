import pytest

from asal import config as cfg
from asal import report


def rec(method, rmse, t, problem="sin", safe=1.0):
    return {"problem": problem, "method": method, "rmse": rmse, "safe_fraction": safe, "query_times": [t, t]}


def test_aggregate_groups_and_ratios():
    rows = report.aggregate(
        [rec("gp_al", 0.1, 1.0), rec("policy", 0.2, 0.01), rec("gp_al", 0.3, 3.0), rec("random", 0.5, 0.0, "branin")],
        reference="gp_al",
    )
    assert [(r["problem"], r["method"], r["n_runs"]) for r in rows] == [
        ("sin", "gp_al", 2), ("sin", "policy", 1), ("branin", "random", 1)
    ]  # fmt: skip
    assert rows[0]["rmse_mean"] == pytest.approx(0.2)
    assert rows[1]["time_ratio"] == pytest.approx(0.01 / 2.0)
    assert rows[1]["rmse_se"] is None and "n/a" in report.format_table(rows[1:2])


def test_standard_error_uses_sample_deviation():
    assert report.standard_error([1.0, 3.0]) == pytest.approx(1.0)
    assert report.standard_error([2.0]) is None


def test_plot_training_handles_short_logs(tmp_path):
    log = [{"step": i + 1, "loss": 1.0 / (i + 1), "lr": 1e-3, "skipped": False} for i in range(10)]
    log.append({"epoch": 1, "step": 10, "mean_loss": 0.3, "rmse": 0.2})
    path = report.plot_training(log, tmp_path / "t.png", window=4)
    assert path.stat().st_size > 0


def test_overrides_win_and_unknown_keys_fail(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seeds = [0, 1]\n[deploy]\nT = 7\nmethods = ["gp_al"]\n[train]\nobjective = "I"\n')
    flat = cfg.load_config(path, {"deploy.T": 9})
    assert flat["deploy.T"] == 9 and flat["seeds"] == [0, 1]
    assert cfg.deploy_config(flat, "gp_al", 3).T == 9
    assert cfg.train_config(flat, seed=2).seed == 2
    with pytest.raises(cfg.ConfigError, match="unknown configuration keys"):
        cfg.load_config(None, {"deploy.nope": 1})
    with pytest.raises(cfg.ConfigError, match="invalid deployment"):
        cfg.deploy_config({"deploy.T": 0}, "gp_al", 0)


def test_parse_value_reads_toml_literals():
    assert cfg.parse_value("3") == 3
    assert cfg.parse_value("true") is True
    assert cfg.parse_value("[1, 2]") == [1, 2]
    assert cfg.parse_value("deepset") == "deepset"


def test_config_hash_is_order_independent():
    assert cfg.config_hash({"a": 1, "b": 2}) == cfg.config_hash({"b": 2, "a": 1})
    assert cfg.config_hash({"a": 1}) != cfg.config_hash({"a": 2})
