import json
import subprocess
import sys

import pytest

from dvalab.cli import EXIT_ABORT, EXIT_INVALID, EXIT_OK, main


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_help_exits_cleanly(capsys):
    code, out, _ = run_cli(capsys, "--help")
    assert code == EXIT_OK
    for cmd in ("gen-data", "train", "run", "oracle", "gradcheck", "plot"):
        assert cmd in out


def test_unknown_subcommand_is_invalid(capsys):
    assert run_cli(capsys, "frobnicate")[0] == EXIT_INVALID


def test_threads_must_be_positive(capsys):
    assert run_cli(capsys, "--threads", "0", "gradcheck")[0] == EXIT_INVALID


def test_oracle_bias_prints_json(capsys):
    code, out, _ = run_cli(capsys, "oracle", "bias", "--bias-const", "-0.5", "--M", "1000", "--mc-samples", "10000")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["va_expected"] == pytest.approx(1.25)


def test_oracle_needs_data_for_stationary(capsys):
    code, _, err = run_cli(capsys, "oracle", "stationary")
    assert code == EXIT_INVALID and "--data" in err


def test_gradcheck_reports_every_family(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--configs", "2")
    assert code == EXIT_OK
    assert sum(line.startswith("PASS") for line in out.splitlines()) == 4


def test_data_train_and_oracle_pipeline(capsys, tmp_path):
    data = tmp_path / "d.csv"
    assert run_cli(capsys, "gen-data", "--M", "40", "--a2", "1.0", "--seed", "3", "--out", data)[0] == EXIT_OK
    trained = tmp_path / "t"
    code, out, _ = run_cli(capsys, "train", "--data", data, "--predictor", "mlp", "--method", "dva",
                           "--epochs", "3", "--batch", "10", "--out", trained)
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["estimate"] > 0
    code, out, _ = run_cli(capsys, "oracle", "stationary", "--data", data, "--model", trained / "model.npz")
    st = json.loads(out)
    assert st["va_stationary"] >= st["dva_stationary"]
    code, out, _ = run_cli(capsys, "oracle", "kkt", "--data", data, "--model", trained / "model.npz",
                           "--state", trained / "state.npz")
    assert code == EXIT_OK
    assert set(json.loads(out)) >= {"lambda1", "lambda2", "max_residual"}


def test_trajectory_data(capsys, tmp_path):
    out = tmp_path / "tr.csv"
    code, _, err = run_cli(capsys, "gen-data", "--kind", "trajectory", "--n-traj", "2", "--horizon", "0.3", "--out", out)
    assert code == EXIT_OK and "wrote 8 points" in err


def test_missing_data_file_is_invalid(capsys, tmp_path):
    assert run_cli(capsys, "train", "--data", tmp_path / "nope.csv")[0] == EXIT_INVALID


def _tiny_config(tmp_path, **kw):
    cfg = dict(n_train=30, hidden=6, ensemble_size=2, epochs=2, batch=10, seeds=[0], a2=[1.0], **kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_then_replay_then_plot(capsys, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    code, out, err = run_cli(capsys, "run", "--config", _tiny_config(tmp_path), "--out", first)
    assert code == EXIT_OK
    assert json.loads(out)[0]["n"] == 1
    assert "[1/1]" in err
    assert run_cli(capsys, "run", "--manifest", first / "manifest.json", "--out", second)[0] == EXIT_OK
    assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()
    code, _, _ = run_cli(capsys, "plot", "--results", first, "--kind", "estimate-vs-a2")
    assert code == EXIT_OK and (first / "estimate-vs-a2.svg").exists()


def test_run_needs_exactly_one_source(capsys, tmp_path):
    assert run_cli(capsys, "run")[0] == EXIT_INVALID
    cfg = _tiny_config(tmp_path)
    assert run_cli(capsys, "run", "--config", cfg, "--preset", "table1")[0] == EXIT_INVALID


def test_invalid_config_exit_code(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seeds": []}')
    code, _, err = run_cli(capsys, "run", "--config", path, "--out", tmp_path / "o")
    assert code == EXIT_INVALID and "seeds" in err


def test_plot_missing_series_is_invalid(capsys, tmp_path):
    out = tmp_path / "r"
    run_cli(capsys, "run", "--config", _tiny_config(tmp_path, methods=["va"]), "--out", out)
    code, _, err = run_cli(capsys, "plot", "--results", out, "--kind", "denoise-scatter")
    assert code == EXIT_INVALID and "scatter" in err


def test_aborted_run_exit_code(capsys, tmp_path, monkeypatch):
    from dvalab import experiments

    def boom(*a, **k):
        raise experiments.TrainingAborted("diverged")

    monkeypatch.setattr(experiments, "train_predictor", boom)
    code, _, err = run_cli(capsys, "run", "--config", _tiny_config(tmp_path), "--out", tmp_path / "o")
    assert code == EXIT_ABORT and "aborted" in err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dvalab.cli", "oracle", "bias", "--M", "100", "--mc-samples", "10000"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "va_expected" in proc.stdout
