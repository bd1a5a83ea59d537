import json
import logging
import re
from pathlib import Path

import pytest

import main as cli
from config_manager import ENV_VARS
from experiment_controller import FpCheckEntry, FpCheckReport
from main import EXIT_BOUND_VIOLATED, EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_OK, main
from sensing.stream import load_trace


@pytest.fixture(autouse=True)
def workspace(tmp_path, monkeypatch):
    """一時ディレクトリをカレントにして設定・ログ・結果をそこに閉じ込める"""
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    yield tmp_path
    logging.basicConfig(force=True)


def test_version(capsys):
    assert main(["version"]) == EXIT_OK
    assert "1.0.0" in capsys.readouterr().out


def test_simulate_writes_log_and_report(workspace, capsys):
    code = main([
        "simulate", "--frames", "2000", "--ratio-m", "10", "--detector", "ideal", "--n", "2",
        "--fr", "30", "--fmin", "10", "--seed", "3",
        "--emit-log", "log.csv", "--report", "report.json",
    ])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "P_miss: 0.0000" in out
    lines = (workspace / "log.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2001
    report = json.loads((workspace / "report.json").read_text(encoding="utf-8"))
    assert report["params"]["e_server"] == pytest.approx(0.95)
    assert (workspace / "data" / "logs" / "sensing.log").exists()


def test_replay_requires_trace():
    assert main(["simulate", "--detector", "replay"]) == EXIT_CONFIG_ERROR


def test_replay_from_trace(workspace, capsys):
    (workspace / "trace.csv").write_text(
        "index,label,score\n0,bg,0.1\n1,foi,0.9\n2,foi,0.2\n3,bg,0.05\n", encoding="utf-8",
    )
    code = main(["simulate", "--detector", "replay", "--trace", "trace.csv", "--n", "1", "--threshold", "0.5"])
    assert code == EXIT_OK
    assert "P_trans: 0.7500" in capsys.readouterr().out


def test_malformed_trace_is_io_error(workspace):
    (workspace / "bad.csv").write_text("index,label,score\n0,bg,1.5\n", encoding="utf-8")
    assert main(["simulate", "--detector", "replay", "--trace", "bad.csv"]) == EXIT_IO_ERROR
    assert main(["simulate", "--detector", "replay", "--trace", "missing.csv"]) == EXIT_IO_ERROR


def test_invalid_gate_is_config_error():
    assert main(["simulate", "--fr", "30", "--fmin", "30"]) == EXIT_CONFIG_ERROR
    assert main(["simulate", "--threshold", "2"]) == EXIT_CONFIG_ERROR
    assert main(["simulate", "--energy-preset", "unknown"]) == EXIT_CONFIG_ERROR


def test_usage_error_exits_with_two():
    with pytest.raises(SystemExit) as excinfo:
        main(["simulate", "--detector", "yolo"])
    assert excinfo.value.code == 2


def test_sweep_from_grid_file(workspace):
    grid = {
        "t_values": [0.3, 0.7], "m_values": [2, 10], "fmin_values": [0, 0.5], "n_values": [1, 4],
        "f_r": 60, "replicates": 2, "base_seed": 1,
        "stream": {"count_mode": "fixed_foi", "n_foi": 50, "mean_segment_len": 5},
        "detector": {"kind": "calibrated", "auc": 0.9},
        "energy": {"preset": "server_dominated"},
    }
    (workspace / "grid.json").write_text(json.dumps(grid), encoding="utf-8")
    code = main(["sweep", "--grid-file", "grid.json", "--out", "out/sweep.csv", "--workers", "1",
                 "--spearman-out", "out/rho.csv"])
    assert code == EXIT_OK
    lines = (workspace / "out" / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("t,m,fmin,n,")
    assert len(lines) == 17
    assert (workspace / "out" / "rho.csv").exists()


def test_invalid_grid_writes_nothing(workspace):
    grid = {"t_values": [0.5], "m_values": [2], "fmin_values": [0.3], "n_values": [1]}
    (workspace / "grid.json").write_text(json.dumps(grid), encoding="utf-8")
    assert main(["sweep", "--grid-file", "grid.json", "--out", "sweep.csv"]) == EXIT_CONFIG_ERROR
    assert not (workspace / "sweep.csv").exists()
    (workspace / "broken.json").write_text("{", encoding="utf-8")
    assert main(["sweep", "--grid-file", "broken.json", "--out", "sweep.csv"]) == EXIT_CONFIG_ERROR


def test_roc(workspace, capsys):
    code = main(["roc", "--detector", "calibrated", "--auc", "0.9", "--samples", "20000", "--out", "roc.csv"])
    assert code == EXIT_OK
    auc = float(re.search(r"AUC: ([0-9.]+)", capsys.readouterr().out).group(1))
    assert auc == pytest.approx(0.9, abs=0.02)
    assert (workspace / "roc.csv").read_text(encoding="utf-8").splitlines()[-1].startswith("# auc=")


def test_fpcheck(capsys):
    assert main(["fpcheck", "--n-max", "4", "--k-set", "0,2,3", "--len", "500"]) == EXIT_OK
    assert "2N+1" in capsys.readouterr().out


def test_fpcheck_reports_violation(monkeypatch):
    monkeypatch.setattr(cli, "inject_fp_check", lambda *a, **k: FpCheckReport([FpCheckEntry(1, 2, 0, 9)]))
    assert main(["fpcheck"]) == EXIT_BOUND_VIOLATED


def test_config_command(monkeypatch, capsys):
    monkeypatch.setenv("SENSING_WORKERS", "2")
    assert main(["config"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "SENSING_WORKERS: 2" in out
    assert '"workers": 2' in out


def test_sample_trace_replays(workspace):
    sample = Path(__file__).resolve().parent.parent / "data" / "sample_trace.csv"
    assert len(load_trace(sample)) == 16
    assert main(["simulate", "--detector", "replay", "--trace", str(sample), "--n", "2"]) == EXIT_OK


def test_config_init_creates_file_from_template(workspace, capsys):
    (workspace / "config_template.json").write_text(json.dumps({"output_dir": "runs"}), encoding="utf-8")
    assert main(["config", "--init"]) == EXIT_OK
    assert json.loads((workspace / "data" / "sim_config.json").read_text(encoding="utf-8")) == {"output_dir": "runs"}
    assert '"output_dir": "runs"' in capsys.readouterr().out
    assert main(["config", "--init"]) == EXIT_OK
    assert "作成しませんでした" in capsys.readouterr().out


def test_simulate_with_energy_file(workspace, capsys):
    params = {"e_cam_low": 1.0, "e_cam_high": 5.0, "e_near": 0.5, "e_tx": 2.0, "e_server": 10.0, "bytes_per_frame": 100}
    (workspace / "energy.json").write_text(json.dumps(params), encoding="utf-8")
    code = main(["simulate", "--energy-file", "energy.json", "--frames", "100", "--detector", "ideal",
                 "--bypass", "--report", "report.json"])
    assert code == EXIT_OK
    assert "従来: 1700.000 J" in capsys.readouterr().out
    report = json.loads((workspace / "report.json").read_text(encoding="utf-8"))
    assert report["params"] == params


def test_energy_file_errors(workspace):
    (workspace / "broken.json").write_text("{", encoding="utf-8")
    (workspace / "list.json").write_text("[1, 2]", encoding="utf-8")
    (workspace / "partial.json").write_text(json.dumps({"e_cam_low": 1.0}), encoding="utf-8")
    (workspace / "text.json").write_text(json.dumps({
        "e_cam_low": "low", "e_cam_high": 5.0, "e_near": 0.5, "e_tx": 2.0, "e_server": 10.0, "bytes_per_frame": 100,
    }), encoding="utf-8")
    for name in ("broken.json", "list.json", "partial.json", "text.json"):
        assert main(["simulate", "--energy-file", name, "--frames", "100"]) == EXIT_CONFIG_ERROR
    assert main(["simulate", "--energy-file", "missing.json", "--frames", "100"]) == EXIT_IO_ERROR


def test_energy_file_and_preset_are_exclusive(workspace):
    (workspace / "energy.json").write_text("{}", encoding="utf-8")
    with pytest.raises(SystemExit) as excinfo:
        main(["simulate", "--energy-file", "energy.json", "--energy-preset", "server_dominated"])
    assert excinfo.value.code == 2


def test_simulate_csv_report_with_heavier_baseline(workspace):
    code = main(["simulate", "--frames", "1000", "--detector", "ideal", "--baseline-preset", "server_heavy",
                 "--report", "report.csv"])
    assert code == EXIT_OK
    lines = (workspace / "report.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("system,e_sensor,")
    assert lines[1].startswith("gated,")
    conventional = lines[2].split(",")
    assert conventional[0] == "conventional"
    assert float(conventional[5]) == pytest.approx(1000 * 2.33)


def test_sweep_writes_heatmaps(workspace):
    grid = {
        "t_values": [0.3, 0.7], "m_values": [2, 10], "fmin_values": [0], "n_values": [1],
        "f_r": 60, "replicates": 1, "base_seed": 1,
        "stream": {"count_mode": "fixed_foi", "n_foi": 50, "mean_segment_len": 5},
        "detector": {"kind": "ideal"},
    }
    (workspace / "grid.json").write_text(json.dumps(grid), encoding="utf-8")
    code = main(["sweep", "--grid-file", "grid.json", "--out", "sweep.csv", "--workers", "1", "--heatmap-out", "heat"])
    assert code == EXIT_OK
    names = sorted(p.name for p in (workspace / "heat").iterdir())
    assert names == ["heatmap_p_miss_t_m.csv", "heatmap_p_trans_t_m.csv", "heatmap_savings_t_m.csv"]
    lines = (workspace / "heat" / "heatmap_p_trans_t_m.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,m,p_trans_mean"
    assert len(lines) == 5
    assert main(["sweep", "--grid-file", "grid.json", "--out", "sweep.csv", "--workers", "1",
                 "--heatmap-out", "heat", "--heatmap-axes", "t"]) == EXIT_CONFIG_ERROR


def test_energy_command(workspace, capsys):
    code = main(["energy", "--m-values", "1,5", "--n-foi", "50", "--segment-len", "5", "--detector", "ideal",
                 "--n", "1", "--offload-fraction", "0.5", "--out", "energy.csv"])
    assert code == EXIT_OK
    assert "server_heavy" in capsys.readouterr().out
    lines = (workspace / "energy.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("preset,m,n_frames,")
    assert len(lines) == 7
    assert [line.split(",")[2] for line in lines[1:]] == ["100"] * 3 + ["300"] * 3
    assert main(["energy", "--m-values", "1,x"]) == EXIT_CONFIG_ERROR
    assert main(["energy", "--server-presets", "server_tiny"]) == EXIT_CONFIG_ERROR


def test_trace_with_invalid_utf8_is_io_error(workspace):
    (workspace / "trace.csv").write_bytes(b"index,label,score\n1,b\xff,0.2\n")
    assert main(["simulate", "--detector", "replay", "--trace", "trace.csv"]) == EXIT_IO_ERROR
