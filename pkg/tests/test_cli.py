import json

import pytest

from trajflow import cli
from trajflow.gp import GpNumericalError
from trajflow.io import load_trajectories

SCENE = """\
bounds = [0, 0, 30, 20]
lateral_noise_std = 0.1

[nodes]
W = [0, 10]
E = [30, 10]

[routes.road]
nodes = ["W", "E"]
count = 5
reverse_count = 5
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scene.toml").write_text(SCENE)
    assert cli.main(["simulate", "--scene", str(d / "scene.toml"), "--seed", "3",
                     "-o", str(d / "data.csv"), "--truth", str(d / "truth.json")]) == 0
    assert cli.main(["train", str(d / "data.csv"), "-o", str(d / "model.json.gz"),
                     "--seed", "1"]) == 0
    return d


def test_simulate_writes_data_and_truth(work):
    ds = load_trajectories(work / "data.csv")
    assert ds.n_t == 10
    truth = json.loads((work / "truth.json").read_text())
    assert set(truth["route"].values()) == {"road>", "road<"}


def test_simulate_is_seeded(work, tmp_path):
    out = tmp_path / "again.csv"
    assert cli.main(["simulate", "--scene", str(work / "scene.toml"), "--seed", "3",
                     "-o", str(out)]) == 0
    assert out.read_text() == (work / "data.csv").read_text()


def test_inject_anomalies(work, tmp_path):
    out = tmp_path / "anom.json"
    assert cli.main(["inject-anomalies", str(work / "data.csv"), "--fraction", "0.3",
                     "--seed", "2", "-o", str(out), "--truth", str(tmp_path / "t.json")]) == 0
    assert load_trajectories(out).n_t == 13
    assert json.loads((tmp_path / "t.json").read_text())["n_added"] == 3


def test_inspect(work, tmp_path, capsys):
    assert cli.main(["inspect", str(work / "model.json.gz"), "--tpm"]) == 0
    assert "motion patterns" in capsys.readouterr().out
    geo = tmp_path / "geo.json"
    assert cli.main(["inspect", str(work / "model.json.gz"), "--json",
                     "--geometry", str(geo)]) == 0
    g = json.loads(geo.read_text())
    assert len(g["patterns"]) == 2 and all(len(tp["ellipse"]) > 10 for tp in g["transition_points"])


def test_predict_jsonl(work, tmp_path):
    out = tmp_path / "steps.jsonl"
    assert cli.main(["predict", str(work / "model.json.gz"), str(work / "data.csv"),
                     "-o", str(out)]) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    ds = load_trajectories(work / "data.csv")
    assert len(recs) == sum(len(t) for t in ds)
    keys = {"track_id", "step", "assigned", "loglik", "anomaly", "active_tp", "predicted",
            "eliminated"}
    assert all(set(r) == keys for r in recs)
    first = [r for r in recs if r["step"] == 0]
    assert len(first) == ds.n_t and all(r["assigned"] is None for r in first)
    assert not any(r["anomaly"] for r in recs)


def test_evaluate_writes_reports(work, tmp_path, monkeypatch):
    monkeypatch.setenv("TRAJFLOW_THREADS", "1")
    js, cs = tmp_path / "r.json", tmp_path / "r.csv"
    assert cli.main(["evaluate", str(work / "data.csv"), "--folds", "2", "--seed", "0",
                     "--set", "model.min_pattern_size=2", "--json", str(js),
                     "--csv", str(cs)]) == 0
    rep = json.loads(js.read_text())
    assert len(rep["per_fold"]) == 2
    assert len(cs.read_text().splitlines()) == 3


def test_config_file_and_flags(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dp": {"alpha": 2.0}}))
    m = tmp_path / "m.json"
    assert cli.main(["train", str(work / "data.csv"), "-o", str(m), "--config", str(cfg),
                     "--set", "online.window_size=4"]) == 0
    d = json.loads(m.read_text())
    assert d["config"]["dp"]["alpha"] == 2.0 and d["online"]["window_size"] == 4


@pytest.mark.parametrize("argv", [
    ["train", "missing.csv", "-o", "m.json"],
    ["train", "{data}", "-o", "{tmp}/m.json", "--set", "dp.nope=1"],
    ["train", "{data}", "-o", "{tmp}/m.json", "--set", "dp.alpha=-1"],
    ["predict", "{data}", "{data}"],
    ["simulate", "-o", "{tmp}/x.csv", "--anomalies", "2"],
    ["frobnicate"],
    ["train"],
])
def test_input_errors_exit_1(work, tmp_path, argv):
    argv = [a.format(data=work / "data.csv", tmp=tmp_path) for a in argv]
    assert cli.main(argv) == 1


def test_bad_thread_setting_exits_1(work, monkeypatch):
    monkeypatch.setenv("TRAJFLOW_THREADS", "zero")
    assert cli.main(["evaluate", str(work / "data.csv"), "--folds", "2"]) == 1


def test_numerical_failure_exits_2(work, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise GpNumericalError("gram matrix not positive definite")
    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", str(work / "data.csv"), "-o", str(tmp_path / "m.json")]) == 2


def test_version(capsys):
    assert cli.main(["--version"]) == 0
    assert "trajflow" in capsys.readouterr().out
