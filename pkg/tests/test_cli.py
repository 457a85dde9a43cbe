"""End-to-end command-line checks, run in process through main()."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

import misalign.cli as cli
from misalign.cli import main, parse_rate_grid, read_config_file
from misalign.model import load_checkpoint
from misalign.synthdata import load_manifest
from misalign.training import TrainingDivergedError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One small dataset plus a trained run, shared across tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    rc = main(
        ["gen", "--out", str(ds), "--splits", "6,1,2", "--points", "300", "--seed", "5"]
    )
    assert rc == 0
    run = root / "run"
    rc = main(
        [
            "train", "--data", str(ds), "--out", str(run),
            "--epochs", "3", "--anchors", "4", "--batch-size", "4",
        ]
    )
    assert rc == 0
    return {"root": root, "ds": ds, "run": run}


class TestParsing:
    def test_rate_grid(self):
        grid = parse_rate_grid("0.0:1.0:0.1")
        assert len(grid) == 11
        assert grid[0] == 0.0 and grid[-1] == 1.0
        np.testing.assert_allclose(np.diff(grid), 0.1)

    def test_rate_grid_single_point(self):
        assert parse_rate_grid("0.4:0.4:0.1") == [0.4]

    @pytest.mark.parametrize("text", ["0:1", "a:b:c", "1:0:0.1", "0:1:0"])
    def test_rate_grid_rejects(self, text):
        with pytest.raises(cli.UsageError):
            parse_rate_grid(text)

    def test_config_file_types(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# comment\nepochs = 12\nlr = 1e-4\nnoisy = true\n"
            "density = range-falloff  # trailing comment\n\n"
        )
        values = read_config_file(path)
        assert values == {
            "epochs": 12, "lr": 1e-4, "noisy": True, "density": "range-falloff"
        }
        assert isinstance(values["epochs"], int)

    def test_config_file_bad_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("no equals sign here\n")
        with pytest.raises(cli.UsageError):
            read_config_file(path)

    def test_config_file_missing(self):
        assert main(["train", "--data", "x", "--out", "y", "--config", "ghost.cfg"]) == 3


class TestGen:
    def test_outputs_and_summary(self, workspace, capsys):
        ds = workspace["ds"]
        assert (ds / "manifest.json").exists()
        assert (ds / "config_echo.txt").exists()
        manifest = load_manifest(ds)
        assert len(manifest.records) == 9
        assert [len(manifest.split_records(s)) for s in ("train", "val", "test")] == [6, 1, 2]

    def test_same_seed_same_bytes(self, workspace, tmp_path):
        again = tmp_path / "again"
        rc = main(
            ["gen", "--out", str(again), "--splits", "6,1,2", "--points", "300", "--seed", "5"]
        )
        assert rc == 0
        assert (again / "manifest.json").read_bytes() == (
            workspace["ds"] / "manifest.json"
        ).read_bytes()
        pair = os.path.join("pairs", "pair_00003", "source.xyz")
        assert (again / pair).read_bytes() == (workspace["ds"] / pair).read_bytes()

    def test_summary_lines(self, tmp_path, capsys):
        rc = main(
            ["gen", "--out", str(tmp_path / "d"), "--splits", "2,1,1", "--points", "300"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "wrote 4 pairs" in out
        assert "label quantiles" in out and "p50=" in out

    def test_pairs_total_with_ratios(self, tmp_path):
        ds = tmp_path / "d"
        rc = main(["gen", "--out", str(ds), "--pairs", "9", "--points", "300"])
        assert rc == 0
        manifest = load_manifest(ds)
        assert [len(manifest.split_records(s)) for s in ("train", "val", "test")] == [6, 1, 2]

    def test_zero_pairs_is_usage_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "d"), "--pairs", "0"]) == 2

    def test_default_is_noisy_icp_regime(self, workspace):
        config = load_manifest(workspace["ds"]).config
        assert config["perturb"]["translation_sigma"] == [2.0, 2.0, 0.2]
        assert config["perturb"]["rotation_sigma_deg"] == [10.0, 2.0, 2.0]
        assert config["perturb"]["magnitude_range"] is None
        assert config["register_with_icp"] is True

    def test_noisy_flag_matches_default(self, tmp_path, workspace):
        ds = tmp_path / "d"
        rc = main(
            ["gen", "--out", str(ds), "--splits", "6,1,2", "--points", "300",
             "--seed", "5", "--noisy"]
        )
        assert rc == 0
        assert (ds / "manifest.json").read_bytes() == (
            workspace["ds"] / "manifest.json"
        ).read_bytes()

    def test_mild_flag_recorded(self, tmp_path):
        ds = tmp_path / "d"
        rc = main(
            ["gen", "--out", str(ds), "--splits", "2,0,1", "--points", "300", "--mild"]
        )
        assert rc == 0
        config = load_manifest(ds).config
        assert config["perturb"]["translation_sigma"] == [0.5, 0.5, 0.1]
        assert config["perturb"]["magnitude_range"] == [0.25, 2.6]

    def test_mild_and_noisy_conflict(self, tmp_path):
        rc = main(
            ["gen", "--out", str(tmp_path / "d"), "--pairs", "2", "--mild", "--noisy"]
        )
        assert rc == 2

    def test_no_icp_keeps_raw_estimate(self, tmp_path):
        ds = tmp_path / "d"
        rc = main(
            ["gen", "--out", str(ds), "--splits", "2,0,1", "--points", "300", "--no-icp"]
        )
        assert rc == 0
        assert load_manifest(ds).config["register_with_icp"] is False

    def test_sigma_overrides(self, tmp_path):
        ds = tmp_path / "d"
        rc = main(
            [
                "gen", "--out", str(ds), "--splits", "2,0,1", "--points", "300",
                "--trans-sigma", "1,1,0.1", "--rot-sigma", "5,1,1",
            ]
        )
        assert rc == 0
        config = load_manifest(ds).config
        assert config["perturb"]["translation_sigma"] == [1.0, 1.0, 0.1]
        assert config["perturb"]["rotation_sigma_deg"] == [5.0, 1.0, 1.0]


class TestFeatures:
    def test_csv_rows(self, workspace, tmp_path):
        out = tmp_path / "feat.csv"
        pair_dir = workspace["ds"] / "pairs" / "pair_00000"
        rc = main(["features", "--pair", str(pair_dir), "--out", str(out), "--anchors", "4"])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        # header + 2 clouds * 4 anchors * 3 scales
        assert len(lines) == 1 + 2 * 4 * 3
        assert lines[0].startswith("anchor_id,src_flag,scale")
        assert (tmp_path / "config_echo.txt").exists()

    def test_missing_pair(self, tmp_path):
        assert main(["features", "--pair", "nowhere", "--out", str(tmp_path / "f.csv")]) == 3


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint.json").exists()
        assert (run / "config_echo.txt").exists()
        history = (run / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,train_loss,val_rmse"
        assert len(history) == 1 + 3

    def test_checkpoint_metadata(self, workspace):
        ckpt = load_checkpoint(workspace["run"] / "checkpoint.json")
        meta = ckpt["metadata"]
        assert meta["train_config"]["epochs"] == 3
        assert meta["train_config"]["n_anchors"] == 4
        assert meta["dataset_config"]["n_pairs"] == 9
        assert meta["best_epoch"] >= 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3

    def test_divergence_exit_code(self, workspace, tmp_path, monkeypatch):
        def boom(root, cfg):
            raise TrainingDivergedError("loss became non-finite")

        monkeypatch.setattr(cli, "train", boom)
        rc = main(["train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r")])
        assert rc == 4

    def test_bad_attention_mode(self, workspace, tmp_path):
        rc = main(
            [
                "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
                "--attention-mode", "psychic",
            ]
        )
        assert rc == 2

    def test_flag_overrides_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("epochs = 1\nanchors = 4\nbatch_size = 4\n")
        out = tmp_path / "r"
        rc = main(
            [
                "train", "--data", str(workspace["ds"]), "--out", str(out),
                "--config", str(cfg), "--epochs", "2",
            ]
        )
        assert rc == 0
        echo = (out / "config_echo.txt").read_text()
        assert "epochs = 2" in echo        # flag wins
        assert "anchors = 4" in echo       # file beats default
        assert "# subcommand: train" in echo

    def test_unknown_config_key(self, workspace, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("no_such_option = 1\n")
        rc = main(
            ["train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
             "--config", str(cfg)]
        )
        assert rc == 2


class TestEval:
    def test_report_files(self, workspace, tmp_path, capsys):
        out = tmp_path / "ev"
        rc = main(
            [
                "eval", "--data", str(workspace["ds"]),
                "--checkpoint", str(workspace["run"] / "checkpoint.json"),
                "--split", "test", "--out", str(out),
            ]
        )
        assert rc == 0
        report = json.loads((out / "eval.json").read_text())
        assert report["n_samples"] == 2
        assert report["rmse"] >= report["mae"] >= 0
        lines = (out / "predictions.csv").read_text().strip().splitlines()
        assert lines[0] == "label,prediction"
        assert len(lines) == 1 + 2
        assert "rmse=" in capsys.readouterr().out

    def test_missing_checkpoint(self, workspace, tmp_path):
        rc = main(
            [
                "eval", "--data", str(workspace["ds"]),
                "--checkpoint", "ghost.json", "--out", str(tmp_path / "e"),
            ]
        )
        assert rc == 3


class TestAblate:
    def test_radius_csv(self, workspace, tmp_path):
        out = tmp_path / "ab"
        rc = main(
            [
                "ablate", "--kind", "radius", "--data", str(workspace["ds"]),
                "--out", str(out), "--epochs", "2", "--anchors", "4",
                "--batch-size", "4", "--seeds", "0",
            ]
        )
        assert rc == 0
        lines = (out / "ablation_radius.csv").read_text().strip().splitlines()
        assert lines[0] == "dataset,variant,n_params,rmse_mean,rmse_seed0"
        variants = [line.split(",")[1] for line in lines[1:]]
        assert variants == ["single_7.5", "single_4", "single_2.5", "concat", "attention"]

    def test_temperature_csv(self, workspace, tmp_path):
        out = tmp_path / "abt"
        rc = main(
            [
                "ablate", "--kind", "temperature", "--data", str(workspace["ds"]),
                "--out", str(out), "--epochs", "2", "--anchors", "4",
                "--batch-size", "4", "--taus", "1.0,0.4",
            ]
        )
        assert rc == 0
        lines = (out / "ablation_temperature.csv").read_text().strip().splitlines()
        assert lines[0] == "tau,rmse,best_val_rmse"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "0.4"]

    def test_unknown_kind(self, workspace, tmp_path):
        rc = main(
            ["ablate", "--kind", "flux", "--data", str(workspace["ds"]),
             "--out", str(tmp_path / "a")]
        )
        assert rc == 2

    def test_missing_dataset(self, tmp_path):
        rc = main(["ablate", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "a")])
        assert rc == 3


class TestMapsim:
    def test_sweep_csv(self, tmp_path):
        out = tmp_path / "ms"
        rc = main(
            [
                "mapsim", "--out", str(out), "--detector", "oracle",
                "--frames", "10", "--scene-points", "400", "--sweep", "0.0:1.0:0.1",
            ]
        )
        assert rc == 0
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "rate,final_error"
        assert len(lines) == 1 + 11
        last_rate, last_err = lines[-1].split(",")
        assert float(last_rate) == 1.0 and float(last_err) == 0.0
        payload = json.loads((out / "mapsim.json").read_text())
        assert payload["mean_final_error"] >= 0.0
        assert len(payload["runs"]) == 1

    def test_rate_mode(self, tmp_path, capsys):
        out = tmp_path / "ms"
        rc = main(
            [
                "mapsim", "--out", str(out), "--detector", "random",
                "--frames", "10", "--scene-points", "400", "--rate", "0.3",
            ]
        )
        assert rc == 0
        payload = json.loads((out / "mapsim.json").read_text())
        assert payload["runs"][0]["rate"] == 0.3
        assert "rate=0.3" in capsys.readouterr().out

    def test_checkpoint_detector(self, workspace, tmp_path):
        out = tmp_path / "ms"
        rc = main(
            [
                "mapsim", "--out", str(out),
                "--detector", str(workspace["run"] / "checkpoint.json"),
                "--frames", "10", "--scene-points", "400", "--rate", "0.2",
            ]
        )
        assert rc == 0
        payload = json.loads((out / "mapsim.json").read_text())
        assert payload["runs"][0]["detector"] == "checkpoint"

    def test_missing_checkpoint_detector(self, tmp_path):
        rc = main(["mapsim", "--out", str(tmp_path / "m"), "--detector", "ghost.json"])
        assert rc == 3

    def test_rate_and_threshold_conflict(self, tmp_path):
        rc = main(
            ["mapsim", "--out", str(tmp_path / "m"), "--rate", "0.2", "--threshold", "0.1"]
        )
        assert rc == 2

    def test_trajectory_averaging(self, tmp_path):
        out = tmp_path / "ms"
        rc = main(
            [
                "mapsim", "--out", str(out), "--detector", "oracle",
                "--frames", "10", "--scene-points", "400", "--rate", "0.2",
                "--trajectories", "2",
            ]
        )
        assert rc == 0
        payload = json.loads((out / "mapsim.json").read_text())
        assert len(payload["runs"]) == 2
        expected = np.mean([r["final_error"] for r in payload["runs"]])
        assert payload["mean_final_error"] == pytest.approx(expected, rel=1e-12)


class TestEntryPoints:
    def test_usage_errors(self):
        assert main([]) == 2
        assert main(["frobnicate"]) == 2
        assert main(["gen"]) == 2          # --out missing

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gen" in capsys.readouterr().out

    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "misalign", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "misalign" in proc.stdout
