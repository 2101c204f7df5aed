"""Tests for CLI commands."""

import json
from unittest.mock import patch

import pytest

from lidarcl.cli import build_spec, cli
from lidarcl.errors import ConfigError


@pytest.fixture
def cli_config(temp_config, tmp_path):
    """User config writing runs under tmp_path."""
    temp_config.set("output.dir", str(tmp_path / "runs"))
    return temp_config


@pytest.fixture
def spec_file(tmp_path):
    """Small fine-tuning experiment on a tiny synthetic dataset."""
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({
        "name": "cli",
        "taxonomy": "desk",
        "train": {"epochs_per_class": 1},
        "dataset": {"synth": {"seed": 3, "scans_per_group": 4, "points_per_scan": 200, "validation_scans": 2}},
    }))
    return path


def invoke(cli_runner, config, args):
    with patch("lidarcl.cli.Config") as MockConfig:
        MockConfig.return_value = config
        return cli_runner.invoke(cli, args)


class TestConfigCommand:
    """Tests for the config command."""

    def test_set_simple_key(self, cli_runner, temp_config):
        result = invoke(cli_runner, temp_config, ["config", "output.dir", "/data/runs"])

        assert result.exit_code == 0
        assert "Set output.dir = /data/runs" in result.output
        assert temp_config.get("output.dir") == "/data/runs"

    def test_dataset_root_reaches_spec(self, temp_config, tmp_path):
        """A configured dataset root is used when the spec names none."""
        temp_config.set("dataset.root", str(tmp_path))
        spec = build_spec(temp_config, None, {"dataset": {"kind": "semantickitti"}, "taxonomy": "cil"})

        assert spec.dataset.root == tmp_path


class TestBuildSpec:
    """Tests for layering spec sources."""

    def test_defaults(self, cli_config, tmp_path):
        spec = build_spec(cli_config, None, {})

        assert spec.name == "experiment"
        assert spec.output_dir == tmp_path / "runs" / "experiment"
        assert spec.dataset.synth.taxonomy == "desk"

    def test_flags_override_file(self, cli_config, spec_file):
        spec = build_spec(cli_config, spec_file, {"train": {"seed": 9}, "strategy": "kd"})

        assert spec.name == "cli"
        assert spec.train.seed == 9
        assert spec.train.epochs_per_class == 1
        assert spec.strategy.value == "kd"

    def test_config_seed(self, cli_config):
        cli_config.set("train.seed", 7)
        spec = build_spec(cli_config, None, {})

        assert spec.train.seed == 7
        assert spec.dataset.synth.seed == 7

    def test_malformed_file(self, cli_config, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  'name': 1\n}")

        with pytest.raises(ConfigError, match="line 2"):
            build_spec(cli_config, path, {})


class TestSynthCommand:
    """Tests for the synth command."""

    def test_writes_dataset(self, cli_runner, cli_config, tmp_path):
        out = tmp_path / "data"
        result = invoke(cli_runner, cli_config, [
            "synth", "--out", str(out), "--scans-per-group", "2", "--points-per-scan", "50",
        ])

        assert result.exit_code == 0
        assert "Wrote" in result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["group_sequences"] == ["00", "01", "02"]

    def test_invalid_settings(self, cli_runner, cli_config, tmp_path):
        result = invoke(cli_runner, cli_config, ["synth", "--out", str(tmp_path / "d"), "--scans-per-group", "0"])

        assert result.exit_code == 2
        assert "Config error" in result.output

    def test_requires_out(self, cli_runner, cli_config):
        result = invoke(cli_runner, cli_config, ["synth"])
        assert result.exit_code != 0


class TestPlanCommand:
    """Tests for the plan command."""

    def test_writes_manifests(self, cli_runner, cli_config, spec_file, tmp_path):
        result = invoke(cli_runner, cli_config, ["plan", "--spec", str(spec_file)])

        assert result.exit_code == 0
        run_dir = tmp_path / "runs" / "cli"
        summary = json.loads((run_dir / "plan_summary.json").read_text())
        assert [s["scans"] for s in summary] == [4, 4, 4]
        assert (run_dir / "steps" / "step2.json").exists()

    def test_incompatible_strategy(self, cli_runner, cli_config, spec_file):
        """Inpainting without background labels is a config error."""
        result = invoke(cli_runner, cli_config, [
            "plan", "--spec", str(spec_file), "--scenario", "sequential", "--strategy", "self_inpaint",
        ])

        assert result.exit_code == 2
        assert "background" in result.output

    def test_unknown_taxonomy(self, cli_runner, cli_config, spec_file):
        result = invoke(cli_runner, cli_config, ["plan", "--spec", str(spec_file), "--taxonomy", "nowhere.json"])
        assert result.exit_code == 2


class TestTrainCommand:
    """Tests for train, eval, report and status on one run."""

    @pytest.fixture
    def trained(self, cli_runner, cli_config, spec_file, tmp_path):
        result = invoke(cli_runner, cli_config, ["train", "--spec", str(spec_file)])
        assert result.exit_code == 0, result.output
        return tmp_path / "runs" / "cli"

    def test_train(self, cli_runner, cli_config, spec_file, tmp_path):
        result = invoke(cli_runner, cli_config, ["train", "--spec", str(spec_file), "--name", "flags"])

        assert result.exit_code == 0
        assert "Training complete" in result.output
        assert "step 2" in result.output
        assert (tmp_path / "runs" / "flags" / "reports" / "step2.json").exists()

    def test_eval(self, cli_runner, cli_config, spec_file, trained, tmp_path):
        json_out = tmp_path / "eval.json"
        result = invoke(cli_runner, cli_config, [
            "eval", str(trained / "checkpoints" / "step1.ckpt"), "--step", "1",
            "--spec", str(spec_file), "--json-out", str(json_out),
        ])

        assert result.exit_code == 0
        assert "road" in result.output
        written = json.loads(json_out.read_text())
        stored = json.loads((trained / "reports" / "step1.json").read_text())
        assert written["confusion"] == stored["confusion"]

    def test_eval_not_a_checkpoint(self, cli_runner, cli_config, spec_file, tmp_path):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_text("hello\n")
        result = invoke(cli_runner, cli_config, ["eval", str(bogus), "--step", "0", "--spec", str(spec_file)])

        assert result.exit_code == 3
        assert "Data error" in result.output

    def test_report(self, cli_runner, cli_config, trained, tmp_path):
        out = tmp_path / "tables"
        result = invoke(cli_runner, cli_config, ["report", str(trained), "--out", str(out)])

        assert result.exit_code == 0
        assert (out / "steps.csv").read_text().startswith("Method,k=0 mIoU_0")
        assert (out / "per_class.md").exists()

    def test_report_without_reports(self, cli_runner, cli_config, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = invoke(cli_runner, cli_config, ["report", str(empty)])

        assert result.exit_code == 3
        assert "no step reports" in result.output

    def test_status(self, cli_runner, cli_config, trained):
        result = invoke(cli_runner, cli_config, ["status", "--out", str(trained)])

        assert result.exit_code == 0
        assert "cli" in result.output
        assert "success" in result.output

    def test_status_across_runs(self, cli_runner, cli_config, trained):
        """Without --out the configured output directory is searched."""
        result = invoke(cli_runner, cli_config, ["status"])

        assert result.exit_code == 0
        assert "success" in result.output


class TestStatusCommand:
    def test_no_run_log(self, cli_runner, cli_config, tmp_path):
        result = invoke(cli_runner, cli_config, ["status", "--out", str(tmp_path)])

        assert result.exit_code == 0
        assert "No run log" in result.output


class TestAblateCommand:
    """Tests for the ablate command."""

    def test_custom_grid(self, cli_runner, cli_config, spec_file, tmp_path):
        result = invoke(cli_runner, cli_config, ["ablate", "--spec", str(spec_file), "--grid", "0:0,0.2:0.7"])

        assert result.exit_code == 0
        table = (tmp_path / "runs" / "cli" / "ablation.csv").read_text().splitlines()
        assert table[0].startswith("tau1,tau2,mIoU_0")
        assert [row.split(",")[:2] for row in table[1:]] == [["0", "0"], ["0.2", "0.7"]]

    def test_invalid_grid(self, cli_runner, cli_config, spec_file):
        result = invoke(cli_runner, cli_config, ["ablate", "--spec", str(spec_file), "--grid", "0.2"])

        assert result.exit_code == 2
        assert "invalid --grid" in result.output
