import csv
import json
import os

import numpy as np
import pytest

from hybridserve import cli
from hybridserve.config import (
    ConfigError,
    ExperimentConfig,
    build_document,
    default_document,
    load_config,
    parse_value,
)
from hybridserve.costmodel import CostModelParams, synthesize_profile

SMALL = {
    "seed": 1,
    "workload": {
        "online": {"preset": "sharegpt_like", "duration": 12, "base_rate": 2,
                   "tidal_amplitude": 0.5, "tidal_period": 12},
        "offline": {"preset": "toolbench_like",
                    "sharing": {"group_count": 2, "shared_prefix_len": 1560, "requests_per_group": 3}},
    },
    "engine": {"capacity_tokens": 32768},
    "plan": {"window_s": 5, "capacities": 3, "base_capacity": 4096, "speeds": [1.0]},
    "report": {"bin_s": 2},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------- config


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("true") is True
    assert parse_value("null") is None
    assert parse_value("FULL") == "FULL"
    assert parse_value('{"a": 1}') == {"a": 1}


def test_defaults_resolve():
    cfg = load_config()
    assert cfg.rung == "FULL"
    assert cfg.engine.scheduler.policy == "kv_aware"
    assert cfg.online.spec.seed == 0 and cfg.offline.spec.seed == 1


def test_overrides_and_rung_expansion():
    doc = build_document(overrides=("rung=BS", "slo.ttft=2", "engine.capacity_tokens=65536"), seed=9)
    assert doc["seed"] == 9
    assert doc["scheduler"]["policy"] == "fcfs" and doc["engine"]["eviction"] == "lru"
    cfg = ExperimentConfig.from_document(doc)
    assert cfg.engine.slo.ttft == 2.0 and cfg.engine.capacity_tokens == 65536


def test_null_rung_keeps_explicit_flags():
    cfg = load_config(overrides=("rung=null", "scheduler.policy=fcfs", "engine.eviction=lru"))
    assert cfg.engine.scheduler.policy == "fcfs" and cfg.engine.eviction == "lru"


@pytest.mark.parametrize(
    "override, field",
    [
        ("engine.bogus=1", "engine.bogus"),
        ("slo.ttft=-1", "slo"),
        ("engine.capacity_tokens=1.5", "engine.capacity_tokens"),
        ("scheduler.headroom=\"x\"", "scheduler.headroom"),
        ("rung=XL", "rung"),
        ("workload.online.preset=nope", "workload.online.preset"),
        ("workload.offline.colour=1", "workload.offline.colour"),
        ("cost_model.true.alpha=-1", "cost_model.true"),
        ("nothing=1", "nothing"),
    ],
)
def test_field_level_errors(override, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(overrides=(override,))


def test_bad_assignment_syntax():
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        load_config(overrides=("noequals",))


def test_config_file_relative_trace(tmp_path):
    (tmp_path / "sub").mkdir()
    trace = tmp_path / "sub" / "t.jsonl"
    trace.write_text(json.dumps({"ts": 0, "kind": "online", "prompt_len": 20, "output_len": 2}) + "\n")
    cfg_path = tmp_path / "sub" / "c.json"
    cfg_path.write_text(json.dumps({"workload": {"online": {"trace": "t.jsonl"}, "offline": None}}))
    cfg = load_config(str(cfg_path))
    assert cfg.online.trace == str(trace)
    assert len(cfg.online.events()) == 1 and cfg.offline.events() == []


def test_default_document_is_json():
    doc = default_document()
    assert json.loads(json.dumps(doc)) == doc


# ------------------------------------------------------------------- cli


def test_run_writes_artifacts_and_round_trips(small_config, tmp_path, capsys):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", small_config, "--out", str(out1)]) == 0
    assert "FULL: throughput=" in capsys.readouterr().out
    for name in ("iterations.csv", "requests.jsonl", "summary.json"):
        assert (out1 / name).exists()
    with open(out1 / "iterations.csv") as fh:
        assert next(csv.reader(fh)) == [
            "iteration", "clock_s", "time_s", "benefit", "punishment", "occupied",
            "online_free", "offline_free", "active_online", "active_offline",
        ]
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["config"]["seed"] == 1
    # re-run from the embedded config
    (tmp_path / "embedded.json").write_text(json.dumps(summary["config"]))
    assert cli.main(["run", "--config", str(tmp_path / "embedded.json"), "--out", str(out2)]) == 0
    for name in ("iterations.csv", "requests.jsonl", "summary.json"):
        assert read(out1 / name) == read(out2 / name)


def test_run_rungs_differ_with_same_requests(small_config, tmp_path):
    a, b = tmp_path / "full", tmp_path / "bs"
    assert cli.main(["run", "--config", small_config, "--out", str(a)]) == 0
    assert cli.main(["run", "--config", small_config, "--set", "rung=BS", "--out", str(b)]) == 0
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    assert sa["online_requests"] == sb["online_requests"]
    assert sa["offline_requests"] == sb["offline_requests"]
    sa.pop("config"), sb.pop("config")
    assert sa != sb


def test_missing_trace_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.jsonl"
    code = cli.main(["run", "--set", f'workload.online={{"trace": "{missing}"}}'])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "invalid JSON" in capsys.readouterr().err
    assert cli.main(["run", "--set", "engine.block_size=true"]) == 2


def test_runtime_error_exit_code(small_config, capsys):
    assert cli.main(["run", "--config", small_config, "--set", "engine.max_iterations=3"]) == 3
    assert "iteration limit" in capsys.readouterr().err


def test_ablation_table(small_config, tmp_path, capsys):
    assert cli.main(["ablation", "--config", small_config, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for rung in ("BS", "BS+E", "BS+E+S", "FULL"):
        assert rung in out
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["rung"] for r in rows] == ["BS", "BS+E", "BS+E+S", "FULL"]
    assert float(rows[0]["speedup_vs_bs"]) == 1.0
    body = json.loads((tmp_path / "ablation.json").read_text())
    assert set(body["rungs"]) == {"BS", "BS+E", "BS+E+S", "FULL"}


def test_generate_traces(small_config, tmp_path, capsys):
    assert cli.main(["generate", "--config", small_config, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "share_rate=" in out and "mean_prompt=" in out
    lines = (tmp_path / "offline.jsonl").read_text().splitlines()
    assert len(lines) == 6
    # generated traces feed back into a run
    doc = dict(SMALL, workload={"online": {"trace": str(tmp_path / "online.jsonl")},
                                "offline": {"trace": str(tmp_path / "offline.jsonl")}})
    cfg = ExperimentConfig.from_document(build_document_from(doc))
    synth = load_config(small_config)
    assert [e.prompt_len for e in cfg.offline.events()] == [e.prompt_len for e in synth.offline.events()]


def build_document_from(doc):
    base = default_document()
    from hybridserve.config import merge

    return merge(base, doc)


def test_generate_invalid_spec(tmp_path, capsys):
    code = cli.main(["generate", "--set", "workload.online.base_rate=-1", "--out", str(tmp_path)])
    assert code == 2
    assert "workload.online" in capsys.readouterr().err


def test_calibrate_round_trip(tmp_path, capsys):
    truth = CostModelParams(alpha=2e-9, beta=5e-5, c=5e-3, gamma=2e-6, delta=1e-6, lam=0.8)
    samples = synthesize_profile(truth, np.random.default_rng(0))
    prof = tmp_path / "profile.jsonl"
    prof.write_text("".join(json.dumps(s.to_record()) + "\n" for s in samples))
    assert cli.main(["calibrate", str(prof), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "prefill: rms_relative_residual" in out
    fit = CostModelParams.from_json(json.loads((tmp_path / "params.json").read_text()))
    for name in ("alpha", "beta", "c", "gamma", "delta", "lam"):
        assert getattr(fit, name) == pytest.approx(getattr(truth, name), rel=1e-6)


def test_calibrate_missing_regime(tmp_path, capsys):
    samples = [s for s in synthesize_profile(CostModelParams(), np.random.default_rng(0)) if s.regime != "mixed"]
    prof = tmp_path / "p.jsonl"
    prof.write_text("".join(json.dumps(s.to_record()) + "\n" for s in samples))
    assert cli.main(["calibrate", str(prof)]) == 2
    assert "mixed" in capsys.readouterr().err


def test_plan_feasible_and_infeasible(small_config, tmp_path, capsys):
    assert cli.main(["plan", "--config", small_config, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "chosen rung" in out and "attainment=" in out and "offline_throughput=" in out
    assert json.loads((tmp_path / "plan.json").read_text())["feasible"] is True
    code = cli.main(["plan", "--config", small_config, "--ttft", "0.001", "--tpot", "0.0001"])
    assert code == 4
    assert "best-effort" in capsys.readouterr().out


def test_plan_with_trace_argument(small_config, tmp_path, capsys):
    assert cli.main(["generate", "--config", small_config, "--which", "online", "--out", str(tmp_path)]) == 0
    assert cli.main(["plan", str(tmp_path / "online.jsonl"), "--config", small_config]) == 0
    assert "chosen rung" in capsys.readouterr().out


def test_report_csvs(small_config, tmp_path):
    run_dir = tmp_path / "run"
    assert cli.main(["run", "--config", small_config, "--out", str(run_dir)]) == 0
    assert cli.main(["report", str(run_dir)]) == 0
    rep = run_dir / "report"
    for name in ("memory.csv", "activity.csv", "hit_ratio.csv", "latency_cdf.csv", "predicted_trace.csv"):
        assert (rep / name).exists()
    with open(rep / "predicted_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["bound"] == ""  # no history yet
    later = [r for r in rows[2:] if r["bound"]]
    assert later and all(float(r["bound"]) >= float(r["mu"]) for r in later)
    with open(rep / "latency_cdf.csv") as fh:
        q = [float(r["quantile"]) for r in csv.DictReader(fh) if r["metric"] == "ttft_s"]
    assert q[-1] == 1.0 and q == sorted(q)


def test_report_missing_files(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "iterations.csv" in capsys.readouterr().err


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "x" / "f.txt"
    cli.write_atomic(str(target), "hello")
    cli.write_atomic(str(target), "again")
    assert target.read_text() == "again"
    assert os.listdir(tmp_path / "x") == ["f.txt"]
