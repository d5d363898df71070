import json

import pytest

from trajflow.config import ConfigError, RunConfig, read_config_file, thread_limit


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.gp.sigma_n == 0.2 and cfg.dp.restarts == 1 and cfg.online.window_size == 6


def test_file_then_flags_precedence(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 4\n[dp]\nalpha = 1.5\nsweeps = 3\n[online]\nwindow_size = 8\n")
    cfg = RunConfig.from_file(path)
    assert (cfg.seed, cfg.dp.alpha, cfg.dp.sweeps, cfg.online.window_size) == (4, 1.5, 3, 8)
    cfg.set("dp.alpha", "0.25").set("seed", "9")
    assert (cfg.seed, cfg.dp.alpha, cfg.dp.sweeps) == (9, 0.25, 3)
    assert cfg.dp.init_clusters == RunConfig().dp.init_clusters


def test_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"gp": {"u_x": 3.0}, "dbscan": {"eps": None}}))
    cfg = RunConfig.from_file(path)
    assert cfg.hyper(100.0).u_x == 3.0 and cfg.hyper(100.0).u_y == pytest.approx(10.0)
    assert cfg.dbscan_params(100.0).eps == pytest.approx(3.0)


@pytest.mark.parametrize("bad", [
    {"dp": {"nope": 1}},
    {"nope": {}},
    {"dp": 3},
    {"dp": {"sweeps": 2.5}},
    {"dp": {"split_moves": "yes"}},
    {"gp": {"sigma_n": None}},
])
def test_bad_settings(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_bool_and_null_overrides():
    cfg = RunConfig().set("dp.split_moves", "false").set("online.l_thresh", "null")
    assert cfg.dp.split_moves is False and cfg.online.l_thresh is None
    with pytest.raises(ConfigError):
        RunConfig().set("alpha", "1")


def test_validate_catches_ranges():
    cfg = RunConfig()
    cfg.dp.alpha = -1.0
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = RunConfig()
    cfg.online.threshold_margin = -0.1
    with pytest.raises(ConfigError):
        cfg.validate()


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[dp\n")
    with pytest.raises(ConfigError):
        read_config_file(bad)


def test_with_seed_copies():
    a = RunConfig()
    b = a.with_seed(7)
    b.dp.alpha = 9.0
    assert a.seed == 0 and a.dp.alpha == 0.5 and b.seed == 7


def test_thread_limit(monkeypatch):
    monkeypatch.delenv("TRAJFLOW_THREADS", raising=False)
    assert thread_limit() is None
    monkeypatch.setenv("TRAJFLOW_THREADS", "3")
    assert thread_limit() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv("TRAJFLOW_THREADS", bad)
        with pytest.raises(ConfigError):
            thread_limit()
