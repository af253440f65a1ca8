"""End-to-end CLI tests on a miniature dataset.

Every command runs in-process through ``cli.main`` so exit codes and stdout
are observable; one test drives the installed console entry point through a
subprocess to prove the packaging works.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from stylesep.cli import EXIT_ARTIFACT, EXIT_CONFIG, EXIT_OK, EXIT_TRAINING, main
from stylesep.core import load_manifest
from stylesep.metrics import MetricsReport
from stylesep.nets import load_checkpoint

TINY_CONFIG = {
    "seed": 0,
    "data": {
        "image_shape": [1, 32, 32],
        "train_subjects_per_cell": 2,
        "test_subjects_per_cell": 2,
        "images_per_subject": 1,
        "seed": 11,
    },
    "model": {
        "d_u": 12,
        "d_s": 2,
        "image_shape": [1, 32, 32],
        "encoder_channels": [4, 8],
        "predictor_hidden": 8,
    },
    "train": {
        "epochs": 2,
        "batch_size": 8,
        "schedule": {
            "steps_stage1": 1,
            "steps_stage2": 1,
            "steps_stage3": 1,
            "warmup_rounds": 0,
        },
    },
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a written config and a generated miniature dataset."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.yaml"
    config.write_text(yaml.safe_dump(TINY_CONFIG))
    data = root / "dataset"
    rc = main(["generate-data", "--config", str(config), "--data", str(data)])
    assert rc == EXIT_OK
    return {"root": root, "config": config, "data": data}


def _train(ws, model, *extra):
    out = ws["root"] / "runs"
    rc = main(
        ["train", "--config", str(ws["config"]), "--data", str(ws["data"]),
         "--out", str(out), "--model", model, *extra]
    )
    assert rc == EXIT_OK
    run_dir = out / (out / "latest").read_text().strip()
    assert run_dir.is_dir()
    return run_dir


@pytest.fixture(scope="module")
def cae_run(ws):
    return _train(ws, "cae")


@pytest.fixture(scope="module")
def pl_run(ws):
    return _train(ws, "pl-se-ada", "--fast")


def _evaluate(ws, run_dir):
    out = ws["root"] / f"eval-{run_dir.name}"
    rc = main(
        ["evaluate", "--config", str(ws["config"]), "--data", str(ws["data"]),
         "--run", str(run_dir), "--out", str(out)]
    )
    assert rc == EXIT_OK
    return out


@pytest.fixture(scope="module")
def cae_eval(ws, cae_run):
    return _evaluate(ws, cae_run)


@pytest.fixture(scope="module")
def pl_eval(ws, pl_run):
    return _evaluate(ws, pl_run)


class TestGenerateData:
    def test_writes_loadable_manifest(self, ws):
        dataset = load_manifest(ws["data"])
        assert len(dataset.records) == 2 * 3 * 4  # 2 domains x 3 diagnoses x 4 subjects
        assert dataset.image_shape == (1, 32, 32)

    def test_same_seed_same_hash(self, ws, tmp_path, capsys):
        main(["generate-data", "--config", str(ws["config"]), "--data", str(ws["data"])])
        first = capsys.readouterr().out
        rc = main(
            ["generate-data", "--config", str(ws["config"]), "--data", str(tmp_path / "again")]
        )
        second = capsys.readouterr().out
        assert rc == EXIT_OK
        assert first.splitlines()[-1] == second.splitlines()[-1]

    def test_seed_flag_changes_hash(self, ws, tmp_path, capsys):
        main(["generate-data", "--config", str(ws["config"]), "--data", str(ws["data"])])
        base = capsys.readouterr().out.splitlines()[-1]
        rc = main(
            ["generate-data", "--config", str(ws["config"]), "--seed", "99",
             "--data", str(tmp_path / "other")]
        )
        other = capsys.readouterr().out.splitlines()[-1]
        assert rc == EXIT_OK
        assert base != other


class TestTrain:
    def test_run_directory_contents(self, cae_run):
        assert (cae_run / "checkpoint.zip").is_file()
        assert (cae_run / "trainlog.jsonl").is_file()
        snapshot = json.loads((cae_run / "config.json").read_text())
        assert snapshot["train"]["epochs"] == 2
        assert snapshot["schema_version"] == 1

    def test_checkpoint_records_variant(self, cae_run, pl_run):
        assert load_checkpoint(cae_run / "checkpoint.zip").variant == "cae"
        bundle = load_checkpoint(pl_run / "checkpoint.zip")
        assert bundle.variant == "pl-se-ada"
        assert bundle.alpha == pytest.approx(0.2)

    def test_fast_profile_snapshot(self, pl_run):
        snapshot = json.loads((pl_run / "config.json").read_text())
        assert snapshot["train"]["epochs"] == 6

    def test_alpha_and_epochs_flags(self, ws):
        run_dir = _train(ws, "pl-se-ada", "--alpha", "0.5", "--epochs", "1")
        snapshot = json.loads((run_dir / "config.json").read_text())
        assert snapshot["train"]["alpha"] == 0.5
        assert snapshot["train"]["epochs"] == 1
        assert load_checkpoint(run_dir / "checkpoint.zip").alpha == pytest.approx(0.5)

    def test_latest_pointer_moves(self, ws, cae_run):
        out = ws["root"] / "runs"
        newest = _train(ws, "ada")
        assert (out / "latest").read_text().strip() == newest.name
        assert cae_run.is_dir()  # earlier run untouched

    def test_divergent_lr_exits_3(self, ws, tmp_path):
        doc = dict(TINY_CONFIG)
        doc["train"] = dict(TINY_CONFIG["train"], lr=1e8)
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump(doc))
        rc = main(
            ["train", "--config", str(bad), "--data", str(ws["data"]),
             "--out", str(tmp_path / "runs"), "--model", "cae"]
        )
        assert rc == EXIT_TRAINING

    def test_missing_dataset_exits_4(self, ws, tmp_path):
        rc = main(
            ["train", "--config", str(ws["config"]), "--data", str(tmp_path / "nope"),
             "--out", str(tmp_path / "runs"), "--model", "cae"]
        )
        assert rc == EXIT_ARTIFACT


class TestEvaluate:
    def test_cae_run_adds_feature_baselines(self, cae_eval):
        models = {p.name for p in cae_eval.glob("metrics-*.json")}
        assert models == {"metrics-cae.json", "metrics-noise.json", "metrics-combat.json"}
        with (cae_eval / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == ["cae", "noise", "combat"]
        combat = next(r for r in rows if r["model"] == "combat")
        assert combat["rmse"] == "n/a"

    def test_pl_run_reports_alpha(self, pl_eval):
        report = MetricsReport.load(pl_eval / "metrics-pl-se-ada.json")
        assert report.model == "pl-se-ada"
        assert report.alpha == pytest.approx(0.2)
        assert report.rmse is not None and report.ssim is not None

    def test_reports_share_dataset_hash(self, cae_eval, pl_eval):
        a = MetricsReport.load(cae_eval / "metrics-cae.json")
        b = MetricsReport.load(pl_eval / "metrics-pl-se-ada.json")
        assert a.dataset_hash == b.dataset_hash

    def test_missing_checkpoint_exits_4(self, ws, tmp_path):
        empty = tmp_path / "fake-run"
        empty.mkdir()
        rc = main(
            ["evaluate", "--config", str(ws["config"]), "--data", str(ws["data"]),
             "--run", str(empty), "--out", str(tmp_path / "eval")]
        )
        assert rc == EXIT_ARTIFACT


class TestReport:
    def test_combines_and_orders_rows(self, ws, cae_eval, pl_eval, capsys):
        out = ws["root"] / "report"
        rc = main(["report", str(cae_eval), str(pl_eval), "--out", str(out)])
        assert rc == EXIT_OK
        with (out / "model_comparison.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == ["cae", "noise", "combat", "pl-se-ada"]
        text = (out / "model_comparison.txt").read_text()
        assert "not reproduced here" in text
        assert capsys.readouterr().out.startswith("model")

    def test_empty_input_exits_4(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        rc = main(["report", str(empty), "--out", str(tmp_path / "rep")])
        assert rc == EXIT_ARTIFACT


class TestSweepAlpha:
    def test_fast_sweep_two_weights(self, ws):
        out = ws["root"] / "sweeps"
        rc = main(
            ["sweep-alpha", "--config", str(ws["config"]), "--data", str(ws["data"]),
             "--out", str(out), "--fast", "--alphas", "0.1", "0.2"]
        )
        assert rc == EXIT_OK
        sweep_dir = out / (out / "latest").read_text().strip()
        lines = (sweep_dir / "sweep.csv").read_text().splitlines()
        assert lines[0] == "alpha,rmse,ssim,disease_f1,domain_f1"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0.1", "0.2"]
        statuses = json.loads((sweep_dir / "sweep_summary.json").read_text())
        assert set(statuses.values()) == {"ok"}
        reference = (sweep_dir / "reference_values.csv").read_text()
        assert "published-adni-reference (not reproduced here)" in reference
        assert (sweep_dir / "alpha_strip.png").is_file()
        strip = json.loads((sweep_dir / "alpha_strip.json").read_text())
        terms = [p["mean_abs_style_term"] for p in strip["panels"]]
        assert terms == sorted(terms)
        # per-weight training runs live inside the sweep directory
        assert len([p for p in sweep_dir.iterdir() if p.is_dir()]) == 2


class TestVisualize:
    def test_pl_run_full_figure_set(self, ws, pl_run):
        out = ws["root"] / "figs-pl"
        rc = main(
            ["visualize", "--config", str(ws["config"]), "--data", str(ws["data"]),
             "--run", str(pl_run), "--out", str(out)]
        )
        assert rc == EXIT_OK
        for name in ("z_u_domain.png", "z_u_diagnosis.png", "z_d_domain.png",
                     "reconstruction_grid.png", "alpha_strip.png"):
            assert (out / name).is_file(), name
        scatter = json.loads((out / "z_u_domain.json").read_text())
        assert scatter["n_points"] == 12
        with (out / "z_u_domain.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 12

    def test_cae_run_skips_style_figures(self, ws, cae_run):
        out = ws["root"] / "figs-cae"
        rc = main(
            ["visualize", "--config", str(ws["config"]), "--data", str(ws["data"]),
             "--run", str(cae_run), "--out", str(out)]
        )
        assert rc == EXIT_OK
        assert (out / "z_u_domain.png").is_file()
        assert not (out / "z_d_domain.png").exists()
        assert not (out / "reconstruction_grid.png").exists()


class TestConfigHandling:
    def test_unknown_top_level_key_exits_2(self, ws, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"sed": 1}))
        rc = main(["generate-data", "--config", str(bad), "--data", str(tmp_path / "d")])
        assert rc == EXIT_CONFIG

    def test_unknown_section_key_exits_2(self, ws, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"train": {"epoch": 3}}))
        rc = main(
            ["train", "--config", str(bad), "--data", str(ws["data"]),
             "--out", str(tmp_path / "r"), "--model", "cae"]
        )
        assert rc == EXIT_CONFIG

    def test_unknown_schedule_key_exits_2(self, ws, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"train": {"schedule": {"stage_4": 1}}}))
        rc = main(
            ["train", "--config", str(bad), "--data", str(ws["data"]),
             "--out", str(tmp_path / "r"), "--model", "cae"]
        )
        assert rc == EXIT_CONFIG

    def test_wrong_schema_version_exits_2(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"schema_version": 9}))
        rc = main(["generate-data", "--config", str(bad), "--data", str(tmp_path / "d")])
        assert rc == EXIT_CONFIG

    def test_missing_config_file_exits_4(self, tmp_path):
        rc = main(
            ["generate-data", "--config", str(tmp_path / "absent.yaml"),
             "--data", str(tmp_path / "d")]
        )
        assert rc == EXIT_ARTIFACT

    def test_invalid_model_value_exits_2(self, ws, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"model": {"d_u": -5}}))
        rc = main(
            ["train", "--config", str(bad), "--data", str(ws["data"]),
             "--out", str(tmp_path / "r"), "--model", "cae"]
        )
        assert rc == EXIT_CONFIG


class TestConsoleEntryPoint:
    def test_installed_script_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "stylesep.cli", "--help"] if False
            else ["stylesep", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        for command in ("generate-data", "train", "evaluate", "sweep-alpha",
                        "report", "visualize"):
            assert command in proc.stdout
