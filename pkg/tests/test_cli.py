import sys
from pathlib import Path

import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import app, main
from usfan.pipeline import SWEEP_COLUMNS
from usfan.storage import load_network, load_posterior

runner = CliRunner()


def _invoke(*args: str):
    return runner.invoke(app, [str(a) for a in args])


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    return tmp_path / "runs" / "tiny"


@pytest.fixture
def trained(run_config: Path, run_dir: Path) -> Path:
    result = _invoke("train-source", "-c", run_config)
    assert result.exit_code == 0, result.output
    return run_dir


@pytest.fixture
def adapted(trained: Path, run_config: Path) -> Path:
    assert _invoke("fit-laplace", "-c", run_config).exit_code == 0
    result = _invoke("adapt", "-c", run_config)
    assert result.exit_code == 0, result.output
    return trained


def test_train_source(trained: Path, run_config: Path):
    for name in ("source.ckpt", "source_metrics.csv", "source_history.csv", "config.py"):
        assert (trained / name).exists()
    history = pd.read_csv(trained / "source_history.csv")
    assert history["epoch"].tolist() == [0, 1, 2]

    digest = load_network(trained / "source.ckpt").digest()
    assert _invoke("train-source", "-c", run_config).exit_code == 0
    assert load_network(trained / "source.ckpt").digest() == digest


def test_fit_laplace(trained: Path, run_config: Path):
    result = _invoke("fit-laplace", "-c", run_config)
    assert result.exit_code == 0, result.output
    posterior = load_posterior(trained / "source.lap")
    assert posterior.shape == (9, 3)


def test_adapt_needs_posterior(trained: Path, run_config: Path):
    result = _invoke("adapt", "-c", run_config)
    assert result.exit_code == 1
    assert "fit-laplace" in result.output
    assert not (trained / "target.ckpt").exists()


def test_baseline_adaptation(trained: Path, run_config: Path):
    result = _invoke("adapt", "-c", run_config, "--baseline")
    assert result.exit_code == 0, result.output

    lines = (trained / "adapt_log.csv").read_text().splitlines()
    assert lines[0] == "# mode=shot-im"
    log = pd.read_csv(trained / "adapt_log.csv", comment="#")
    assert len(log) == 8
    assert log["epoch"].tolist() == [0] * 4 + [1] * 4
    assert (log["mean_weight"] == 1.0).all()

    source = load_network(trained / "source.ckpt")
    target = load_network(trained / "target.ckpt")
    assert source.head_matrix().tolist() == target.head_matrix().tolist()


def test_laplace_adaptation(adapted: Path):
    lines = (adapted / "adapt_log.csv").read_text().splitlines()
    assert lines[0] == "# mode=u-sfan"


@pytest.mark.parametrize("mode", ["map", "predictive"])
def test_eval(adapted: Path, run_config: Path, mode: str):
    result = _invoke("eval", "-c", run_config, "--mode", mode)
    assert result.exit_code == 0, result.output
    df = pd.read_csv(adapted / f"eval_target_{mode}.csv")
    assert df["support"].sum() == 60
    assert len(df) == 3


def test_eval_of_source_checkpoint(trained: Path, run_config: Path):
    result = _invoke("eval", "-c", run_config, "--checkpoint", trained / "source.ckpt")
    assert result.exit_code == 0, result.output
    assert (trained / "eval_source_map.csv").exists()


def test_grid(adapted: Path, run_config: Path):
    result = _invoke("grid", "-c", run_config)
    assert result.exit_code == 0, result.output
    df = pd.read_csv(adapted / "grid_target_map.csv")
    assert len(df) == 25
    assert list(df.columns) == ["x", "y", "class", "confidence", "weight"]


def test_entropy(adapted: Path, run_config: Path):
    result = _invoke("entropy", "-c", run_config, "--mode", "predictive")
    assert result.exit_code == 0, result.output
    df = pd.read_csv(adapted / "entropy_target_predictive.csv")
    assert len(df) == 4
    assert df["count_correct"].sum() + df["count_incorrect"].sum() == 60


def test_predictive_mode_needs_posterior(trained: Path, run_config: Path):
    result = _invoke(
        "grid", "-c", run_config, "--checkpoint", trained / "source.ckpt", "--mode", "predictive"
    )
    assert result.exit_code == 1


def test_sweep(run_config: Path, run_dir: Path):
    result = _invoke("sweep", "-c", run_config)
    assert result.exit_code == 0, result.output
    df = pd.read_csv(run_dir / "sweep.csv")
    assert list(df.columns) == SWEEP_COLUMNS
    assert len(df) == 1


def test_missing_csv_exits_with_data_error(tmp_path: Path):
    config = tmp_path / "csv.py"
    config.write_text(
        f'experiment = "csv"\noutput_root = "{tmp_path}"\n'
        f'source_csv = "{tmp_path / "absent.csv"}"\ntarget_csv = "{tmp_path / "t.csv"}"\n'
    )
    result = _invoke("train-source", "-c", config)
    assert result.exit_code == 2
    assert "absent.csv" in result.output.replace("\n", "")


def test_bad_config_key_exits_with_config_error(tmp_path: Path):
    config = tmp_path / "bad.py"
    config.write_text(f'output_root = "{tmp_path}"\ngamme = 0.5\n')
    result = _invoke("train-source", "-c", config)
    assert result.exit_code == 1
    assert "gamme" in result.output


def test_usage_error_exits_with_one(monkeypatch):
    monkeypatch.setattr(sys, "argv", ["usfan", "no-such-command"])
    with pytest.raises(SystemExit) as e:
        main()
    assert e.value.code == 1


def test_parent_experiment_name_is_rejected(tmp_path: Path):
    root = tmp_path / "runs"
    config = tmp_path / "escape.py"
    config.write_text(f'experiment = ".."\noutput_root = "{root}"\nepochs_source = 1\n')
    result = _invoke("train-source", "-c", config)
    assert result.exit_code == 1
    assert not (tmp_path / "source.ckpt").exists()
