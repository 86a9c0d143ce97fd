from __future__ import annotations

import json
from pathlib import Path

import pytest

import sharedserve
from sharedserve.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main, parse_sweep
from sharedserve.errors import ConfigError

SCENARIOS = Path(sharedserve.__file__).parent / "scenarios"


def _summary(out: Path) -> list[dict]:
    return json.loads((out / "summary.json").read_text())


def _write(tmp_path: Path, text: str) -> str:
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return str(path)


def test_head_of_line_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["--config", str(SCENARIOS / "head_of_line.yaml"), "--out-dir", str(out)])
    assert code == EXIT_OK
    assert "l_n_mean" in capsys.readouterr().out
    assert {p.name for p in out.iterdir()} == {"summary.csv", "summary.json", "config.yaml", "runs"}
    run = out / "runs" / "db"
    assert (run / "run.log").stat().st_size > 0
    payload = json.loads((run / "metrics.json").read_text())
    assert payload["run"]["requests"] == 5 and payload["metrics"]["unservable"] == 0


def test_policy_override_orders_head_of_line(tmp_path):
    ln = {}
    for pol in ("db", "rr", "fcfs"):
        out = tmp_path / pol
        assert main(["--config", str(SCENARIOS / "head_of_line.yaml"), "--policy", pol,
                     "--out-dir", str(out)]) == EXIT_OK
        ln[pol] = _summary(out)[0]["l_n_mean"]
    assert ln["db"] < ln["rr"] < ln["fcfs"]


def test_sweep_rate_expands_rows(tmp_path):
    cfg = _write(tmp_path, """
seed: 0
cluster: {gpus_per_node: 1}
services: [{service_id: a, model_id: llama2-7b, preset: code}]
trace: {kind: poisson, rate: 1, duration: 20}
placement: {mode: dedicated}
""")
    out = tmp_path / "out"
    assert main(["--config", cfg, "--sweep-rate", "2:50:8", "--out-dir", str(out)]) == EXIT_OK
    rows = _summary(out)
    assert [r["rate"] for r in rows] == pytest.approx(parse_sweep("2:50:8"))
    assert len(rows) == 8 and rows[0]["rate"] == 2.0 and rows[-1]["rate"] == 50.0
    header = (out / "summary.csv").read_text().splitlines()[0]
    assert header.startswith("label,variant,policy,rate")


def test_density_divides_the_cluster(tmp_path):
    cfg = _write(tmp_path, """
seed: 0
cluster: {gpus_per_node: 4, num_nodes: 1}
services:
  - {service_id: a, model_id: llama2-7b, preset: code}
  - {service_id: b, model_id: llama2-7b, preset: chat}
  - {service_id: c, model_id: opt-6.7b, preset: code}
trace: {kind: poisson, rate: 1, duration: 10}
placement: {mode: dedicated}
""")
    out = tmp_path / "o"
    # three dedicated engines fit on 4 GPUs but not on the 2 left at density 2
    assert main(["--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    plan = json.loads((out / "runs" / "db" / "metrics.json").read_text())["plan"]
    assert max(g for e in plan["engines"] for g in e["gpus"]) < 4
    assert main(["--config", cfg, "--density", "2", "--out-dir", str(out)]) == EXIT_INFEASIBLE


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = _write(tmp_path, "services: [{service_id: a, model_id: llama2-7b}]\nscheduler: {beta: 1.5}\n")
    assert main(["--config", bad, "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "beta" in capsys.readouterr().err
    ok = str(SCENARIOS / "head_of_line.yaml")
    assert main(["--config", ok, "--density", "0"]) == EXIT_CONFIG
    assert main(["--config", ok, "--sweep-rate", "5:1:3"]) == EXIT_CONFIG


def test_infeasible_placement_exits_3(tmp_path, capsys):
    cfg = _write(tmp_path, """
cluster: {gpus_per_node: 1}
services: [{service_id: big, model_id: llama2-70b, preset: chat}]
trace: {kind: poisson, rate: 1, duration: 10}
placement: {mode: dedicated}
""")
    assert main(["--config", cfg, "--out-dir", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert "infeasible placement" in capsys.readouterr().err


def test_parse_sweep():
    assert parse_sweep("1:3:3") == [1.0, 2.0, 3.0]
    assert parse_sweep("4:4:1") == [4.0]
    for bad in ("1:2", "a:b:c", "0:2:2", "1:2:0"):
        with pytest.raises(ConfigError):
            parse_sweep(bad)
