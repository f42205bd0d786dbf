#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the command-line surface and the pipeline behind it.
"""

import sys
import os
import json

import pandas as pd
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from os_models import derive_rng
from tcp_models import FlowLabelPrng
from flowlabel_cryptanalysis import oracle_labels, write_sample_file
from main import (
    EXIT_FAILURE, EXIT_OK, EXIT_USAGE, CovertSimPipeline, ScenarioError, load_scenario, main,
    validate_scenario,
)

SCENARIO = {
    "test_id": "T-ex",
    "os": "macos",
    "scenario": "dmz_exfil",
    "protocol": "UDP",
    "master_seed": 31,
    "repetitions": 2,
    "topology": {"variant": "dmz_exfil", "target": {"os": "macos"}},
    "channel": {"kind": "exclusion", "params": {"K": 700}},
    "message": "1001",
}


def _write(tmp_path, name, document):
    path = tmp_path / name
    path.write_text(json.dumps(document) if not isinstance(document, str) else document, encoding='utf-8')
    return str(path)


@pytest.fixture
def pipeline(tmp_path):
    return CovertSimPipeline(overrides={"paths": {"output_dir": str(tmp_path / "out"),
                                                  "template_dir": str(tmp_path / "templates")}})


def test_list_scenarios_includes_bundled_runs(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path / "out"), "list-scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    for test_id in ("LE-1-desk", "WE-1", "ME-1", "OE-1", "NE-1", "LA-1a"):
        assert test_id in out


def test_bundled_scenarios_all_validate(pipeline):
    rows = pipeline.list_scenarios()
    assert len(rows) >= 20
    assert {r["channel"] for r in rows} >= {"linux", "windows", "exclusion", "netbsd_isn"}


@pytest.mark.parametrize("broken, field", [
    ({"channel": {"kind": "exclusion"}}, "master_seed"),
    ({"master_seed": "7", "channel": {"kind": "exclusion"}}, "master_seed"),
    ({"master_seed": 7, "channel": {"kind": "smoke"}}, "channel.kind"),
    ({"master_seed": 7, "channel": {"kind": "linux"}, "topology": {"variant": "mesh"}}, "topology.variant"),
    ({"master_seed": 7, "channel": {"kind": "linux"}, "topology": {"target": {"os": "plan9"}}},
     "topology.target.os"),
    ({"master_seed": 7, "channel": {"kind": "linux"}, "repetitions": 0}, "repetitions"),
    ({"master_seed": 7, "channel": {"kind": "linux"}, "message": "10x1"}, "message"),
])
def test_validate_scenario_names_the_field(broken, field):
    with pytest.raises(ScenarioError) as info:
        validate_scenario(broken, "broken.json")
    assert info.value.field == field


def test_malformed_json_reports_line(tmp_path):
    path = _write(tmp_path, "bad.json", '{\n  "master_seed": 1,\n  oops\n}')
    with pytest.raises(ScenarioError, match="line 3"):
        load_scenario(path)


def test_invalid_scenario_exits_with_usage_status(tmp_path, capsys):
    path = _write(tmp_path, "bad.json", {"channel": {"kind": "exclusion"}})
    assert main(["--out-dir", str(tmp_path / "out"), "run", path]) == EXIT_USAGE
    assert "master_seed" in capsys.readouterr().err


def test_missing_scenario_exits_with_usage_status(tmp_path):
    assert main(["--out-dir", str(tmp_path / "out"), "run", "no-such-scenario"]) == EXIT_USAGE


def test_channel_misconfiguration_exits_with_usage_status(tmp_path):
    scenario = {**SCENARIO, "channel": {"kind": "linux", "params": {}}}
    path = _write(tmp_path, "linux-on-mac.json", scenario)
    assert main(["--out-dir", str(tmp_path / "out"), "run", path]) == EXIT_USAGE


def test_run_writes_every_artifact(tmp_path, capsys):
    out = tmp_path / "out"
    path = _write(tmp_path, "T-ex.json", SCENARIO)
    assert main(["--out-dir", str(out), "run", path]) == EXIT_OK
    run_dir = out / "T-ex"
    for name in ("transcript_rep0.jsonl", "transcript_rep1.jsonl", "events_rep0.jsonl", "summary.csv",
                 "bit_timing.csv", "report.html", "report.xlsx"):
        assert (run_dir / name).exists(), name
    assert (out / "covertsim.log").exists()
    summary = pd.read_csv(run_dir / "summary.csv")
    assert summary["seed"].tolist() == [31, 32]
    assert summary["successes"].tolist() == [4, 4]
    assert "T-ex" in capsys.readouterr().out


def test_cli_overrides_seed_repetitions_and_format(tmp_path):
    out = tmp_path / "out"
    path = _write(tmp_path, "T-ex.json", SCENARIO)
    assert main(["--out-dir", str(out), "--seed", "5", "--repetitions", "1", "--format", "csv", "run", path]) == 0
    summary = pd.read_csv(out / "T-ex" / "summary.csv")
    assert summary["seed"].tolist() == [5]
    assert (out / "T-ex" / "transcript_rep0.csv").exists()


def test_runs_are_reproducible(tmp_path, pipeline):
    path = _write(tmp_path, "T-ex.json", {**SCENARIO, "repetitions": 1})
    first = pipeline.run_scenario(path)
    events = open(first["artifacts"]["events_0"], encoding='utf-8').read()
    second = pipeline.run_scenario(path)
    assert open(second["artifacts"]["events_0"], encoding='utf-8').read() == events
    assert first["summary"] == second["summary"]
    assert first["status"] == EXIT_OK


def test_config_file_sections_merge(tmp_path):
    config = _write(tmp_path, "config.json", {"report_settings": {"excel": False},
                                              "paths": {"output_dir": str(tmp_path / "cfg-out")}})
    pipeline = CovertSimPipeline(config, {"paths": {"template_dir": str(tmp_path / "templates")}})
    assert pipeline.config["report_settings"] == {"html": True, "excel": False, "charts": True}
    assert pipeline.config["run_settings"]["format"] == "records"


def test_unreadable_config_exits_with_usage_status(tmp_path):
    config = _write(tmp_path, "config.json", "{ not json")
    assert main(["--config", config, "list-scenarios"]) == EXIT_USAGE


def test_monte_carlo_sweep(tmp_path, pipeline):
    sweep = _write(tmp_path, "mc.json", {"monte_carlo": "exclusion_miss", "master_seed": 2, "trials": 50,
                                         "grid": {"K": [100, 200], "m_cap": [1024]}})
    result = pipeline.run_sweep(sweep)
    assert len(result["rows"]) == 2
    assert pd.read_csv(result["path"]).shape[0] == 2
    assert result["status"] == EXIT_OK


def test_sweep_over_cap_exits_with_usage_status(tmp_path):
    sweep = _write(tmp_path, "big.json", {"monte_carlo": "exclusion_miss", "grid": {"K": list(range(300))}})
    assert main(["--out-dir", str(tmp_path / "out"), "sweep", sweep]) == EXIT_USAGE


def test_crypto_rejects_empty_sample_file(tmp_path, capsys):
    samples = _write(tmp_path, "labels.txt", "# nothing here\n")
    assert main(["--out-dir", str(tmp_path / "out"), "crypto", samples]) == EXIT_USAGE
    assert "no flow labels" in capsys.readouterr().err


def test_crypto_phase_failure_exits_nonzero(tmp_path):
    samples = tmp_path / "few.txt"
    rng = derive_rng(1, "oracle")
    write_sample_file(oracle_labels(FlowLabelPrng.create(rng), rng, 5), samples)
    assert main(["--out-dir", str(tmp_path / "out"), "crypto", str(samples)]) == EXIT_FAILURE


@pytest.mark.slow
def test_crypto_recovers_seed(tmp_path, capsys):
    samples = tmp_path / "labels.txt"
    rng = derive_rng(2024, "oracle")
    write_sample_file(oracle_labels(FlowLabelPrng.create(rng), rng, 100), samples, comment="oracle run")
    assert main(["--out-dir", str(tmp_path / "out"), "crypto", str(samples)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "validation:" in out and "OK" in out
    assert (tmp_path / "out" / "crypto" / "labels_seed.json").exists()
