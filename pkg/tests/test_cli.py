import json
import subprocess
import sys
from pathlib import Path

import pytest

from rdma_forge import data_path
from rdma_forge.adapter import AdapterError, AdapterTester, AdapterTimeout
from rdma_forge.cli import main
from rdma_forge.config import ConfigError, load_config
from rdma_forge.report import (
    REPORT_COLUMNS,
    load_anomalies,
    load_trajectory,
    parse_report_columns,
)
from rdma_forge.simulator import simulate
from rdma_forge.workload import sample_random

ECHO = str(Path(__file__).resolve().parents[1] / "scripts" / "echo_adapter.py")
TABLE_COLUMNS = ("#", "RNIC", "Direc.", "Transport", "MTU", "WQE", "SGE", "WQ depth",
                 "Message Pattern", "# of QPs", "Symptom")


@pytest.fixture
def defaults(tmp_path):
    assert main(["gen-defaults", "--out", str(tmp_path)]) == 0
    return tmp_path


def write_config(path, **fields):
    path.write_text(json.dumps(fields, indent=2))
    return path


def test_gen_defaults_emits_reference_files(defaults):
    for name in ("spec.json", "rules.json", "space.json", "config.json", "pause_point.json"):
        assert (defaults / name).exists()
    cfg = load_config(defaults / "config.json")
    assert cfg.mode == "simulator" and len(cfg.rules) == 6


def test_search_reference_config(defaults):
    code = main(["search", "--config", str(defaults / "config.json")])
    assert code == 2
    out = defaults / "out"
    records = load_anomalies(out / "anomalies.json")
    assert len(records) == 6
    rows = load_trajectory(out / "trajectory.csv")
    assert rows and all(0 <= v <= 1 for _, _, v, _ in rows)
    assert parse_report_columns((out / "report.md").read_text()) == TABLE_COLUMNS == REPORT_COLUMNS
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64


def test_search_with_empty_rule_library_is_clean(defaults):
    (defaults / "empty.json").write_text('{"rules": []}')
    cfg = write_config(defaults / "c.json", spec="spec.json", rules="empty.json", output_dir="o")
    assert main(["search", "--config", str(cfg), "--budget", "100"]) == 0
    assert load_anomalies(defaults / "o" / "anomalies.json") == []


def test_missing_spec_file_is_named(defaults, capsys):
    cfg = write_config(defaults / "c.json", spec="nope/spec.json", rules="rules.json")
    assert main(["search", "--config", str(cfg)]) == 1
    assert "nope/spec.json" in capsys.readouterr().err


def test_config_parse_error_has_location(defaults, capsys):
    (defaults / "c.json").write_text('{\n  "rules": "rules.json",\n  "seed": 1,,\n}')
    assert main(["search", "--config", str(defaults / "c.json")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_config_field_error_names_field_and_line(defaults):
    cfg = write_config(defaults / "c.json", rules="rules.json", sa={"alpha": 1.5})
    with pytest.raises(ConfigError, match=r"c\.json:\d+: field 'sa'.*alpha"):
        load_config(cfg)
    cfg = write_config(defaults / "c.json", rules="rules.json", counters=["bogus"])
    with pytest.raises(ConfigError, match="bogus"):
        load_config(cfg)


def test_exactly_one_tester_mode(defaults):
    with pytest.raises(ConfigError, match="exactly one"):
        load_config(write_config(defaults / "c.json", rules="rules.json", adapter="python3 x.py"))
    with pytest.raises(ConfigError, match="exactly one"):
        load_config(write_config(defaults / "c.json", spec="spec.json"))


def test_search_is_byte_identical_and_manifest_replays(defaults, tmp_path):
    cfg = str(defaults / "config.json")
    assert main(["search", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 2
    assert main(["search", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 2
    manifest = tmp_path / "a" / "manifest.json"
    assert main(["search", "--config", str(manifest), "--out", str(tmp_path / "c")]) == 2
    for name in ("anomalies.json", "trajectory.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_replay_ud_send_pause_point(defaults, capsys):
    code = main(["replay", "--point", str(data_path("ud_send_pause_point.json")),
                 "--spec", str(defaults / "spec.json"), "--rules", str(defaults / "rules.json")])
    out = json.loads(capsys.readouterr().out)
    assert code == 2
    assert out["measurement"]["pause_duration_ratio"] == 0.20
    assert out["verdict"] == "pause-anomaly"


def test_replay_baseline_point(defaults, capsys, spec, space):
    point = defaults / "p.json"
    raw = json.loads(data_path("ud_send_pause_point.json").read_text())
    raw["wq_depth"] = 128
    point.write_text(json.dumps(raw))
    code = main(["replay", "--point", str(point), "--spec", str(defaults / "spec.json"),
                 "--rules", str(defaults / "rules.json")])
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["verdict"] == "none"
    assert out["measurement"]["pause_duration_ratio"] == 0.0


def test_replay_malformed_point(defaults, capsys):
    (defaults / "bad.json").write_text('{"src_device": 0,\n "mtu_bytes": }')
    code = main(["replay", "--point", str(defaults / "bad.json"), "--spec", str(defaults / "spec.json")])
    assert code == 1
    assert "line 2 column" in capsys.readouterr().err


def test_check_space(defaults, capsys):
    main(["search", "--config", str(defaults / "config.json")])
    anomalies = str(defaults / "out" / "anomalies.json")
    capsys.readouterr()
    assert main(["check-space", "--space", str(defaults / "space.json"), "--anomalies", anomalies]) == 2
    witnesses = json.loads(capsys.readouterr().out)["witnesses"]
    assert len(witnesses) == 6
    # one-sided RC WRITE, unidirectional, no loopback and short queues avoids every known region
    restricted = defaults / "safe.json"
    restricted.write_text(json.dumps({
        "transports": [["RC", "WRITE"]], "directions": ["unidirectional"], "loopback_choices": [False],
        "mr_count_choices": [16], "wq_depth_choices": [16, 64],
    }))
    assert main(["check-space", "--space", str(restricted), "--anomalies", anomalies]) == 0
    restricted.write_text('{"mtu_choices": "big"}')
    assert main(["check-space", "--space", str(restricted), "--anomalies", anomalies]) == 1


def adapter_config(defaults, *args, timeout=120, budget=None):
    fields = dict(spec="spec.json", adapter=[sys.executable, ECHO, *args], adapter_timeout_s=timeout,
                  output_dir="ad")
    if budget is not None:
        fields["sa"] = {"eval_budget": budget}
    return str(write_config(defaults / "adapter.json", **fields))


def test_echo_adapter_runs_a_campaign(defaults):
    assert main(["search", "--config", adapter_config(defaults, budget=40)]) == 0
    doc = json.loads((defaults / "ad" / "anomalies.json").read_text())
    assert doc["anomalies"] == [] and doc["summary"]["evaluations"] == 40


def test_adapter_error_aborts_with_partial_results(defaults, tmp_path, capsys):
    paused = tmp_path / "m.json"
    paused.write_text(json.dumps({
        "achieved_bps": 1e11, "achieved_pps": 1e7, "pause_duration_ratio": 0.3,
        "perf_counters": {"tx_bps": 1e11, "rx_bps": 1e11, "tx_pps": 1e7},
        "diag_counters": {"recv_wqe_cache_miss": 1.0, "icm_cache_miss": 1.0, "pcie_backpressure": 1.0},
    }))
    cfg = adapter_config(defaults, "--measurement", str(paused), "--error-after", "12")
    assert main(["search", "--config", cfg]) == 1
    assert "traffic engine lost the link" in capsys.readouterr().err
    doc = json.loads((defaults / "ad" / "anomalies.json").read_text())
    assert doc["summary"]["error"]
    assert (defaults / "ad" / "trajectory.csv").exists()


def test_adapter_timeout_names_evaluation(space, spec):
    with AdapterTester([sys.executable, ECHO, "--hang-after", "2"], timeout_s=0.5) as tester:
        p = sample_random(space, 0)
        tester(p)
        tester(p)
        with pytest.raises(AdapterTimeout, match="evaluation #3"):
            tester(p)


def test_adapter_round_trips_measurements(space, spec, tmp_path):
    p = sample_random(space, 1)
    m = simulate(p, spec)
    canned = tmp_path / "m.json"
    canned.write_text(json.dumps(m.to_dict()))
    with AdapterTester([sys.executable, ECHO, "--measurement", str(canned)]) as tester:
        assert tester(p) == m
        assert tester.request_index == 1


def test_adapter_rejects_measurements_without_counters(space, tmp_path):
    bare = tmp_path / "m.json"
    bare.write_text(json.dumps({"achieved_bps": 1.0, "achieved_pps": 1.0, "pause_duration_ratio": 0.0}))
    with AdapterTester([sys.executable, ECHO, "--measurement", str(bare)]) as tester:
        with pytest.raises(AdapterError, match="lacks counter"):
            tester(sample_random(space, 2))


def test_adapter_that_cannot_start():
    with pytest.raises(AdapterError, match="cannot start"):
        AdapterTester(["/nonexistent/adapter"]).start()


def test_module_entry_point_and_log_env(defaults):
    env = {"COLLIE_FORGE_LOG": "info", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run(
        [sys.executable, "-m", "rdma_forge", "search", "--config", str(defaults / "config.json"),
         "--budget", "200", "--out", str(defaults / "m")],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode in (0, 2)
    assert "counter ranking" in proc.stderr
