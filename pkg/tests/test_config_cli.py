"""Config schema, file-based stages, and the command line surface."""

import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from voxcycle import workflow
from voxcycle.cli import cli
from voxcycle.config import load_config, validate_config
from voxcycle.errors import ValidationError
from voxcycle.volume_io import (
    Domain,
    LabelMap,
    Volume,
    read_volume,
    write_labelmap,
    write_volume,
)

DESK_CONFIG = "configs/desk_phantom.yaml"


def _tiny_dict(**overrides):
    base = {
        "config_version": 1,
        "seed": 0,
        "output_dir": "run",
        "eval_mode": "four_label",
        "data": {
            "source": "phantom",
            "n_labels": 4,
            "val_fraction": 0.25,
            "phantom": {"shape": [32, 32, 32], "per_domain": 2},
        },
        "augment": {
            "n_outputs": 1,
            "elastic_grid": [3, 3, 3],
            "elastic_max_displacement": 2.0,
            "normalization": "rescale_unit",
        },
        "networks": {"base_filters": 2, "norm": "instance"},
        "phases": {
            "phase1_epochs": 1,
            "phase2_warmup_epochs": 1,
            "phase2_spatial_epochs": 1,
            "phase3_epochs": 1,
            "learning_rate": 0.001,
            "patch_size": [32, 32, 32],
            "patches_per_sample": 1,
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return base


def _write_cfg(path, **overrides):
    path.write_text(yaml.safe_dump(_tiny_dict(**overrides)))
    return path


class TestConfigValidation:
    def test_shipped_default_is_clean(self):
        assert validate_config(DESK_CONFIG) == []

    def test_shipped_template_flags_only_paths(self):
        violations = validate_config("configs/mmwhs_template.yaml")
        assert violations and all("does not exist" in v for v in violations)

    def test_patch_not_divisible(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", phases={"patch_size": [50, 50, 50]})
        violations = validate_config(p)
        assert any("phases.patch_size" in v and "divisible by 32" in v
                   for v in violations)

    def test_bad_phase2_step_budget(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", phases={"phase2_steps_per_epoch": 0})
        assert any("phases.phase2_steps_per_epoch" in v for v in validate_config(p))
        p = _write_cfg(tmp_path / "c.yaml", phases={"phase2_steps_per_epoch": 5})
        assert validate_config(p) == []

    def test_negative_lambda_cycle(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", weights={"lambda_cycle": -1.0})
        violations = validate_config(p)
        assert any("weights.lambda_cycle" in v and "nonnegative" in v
                   for v in violations)

    def test_all_violations_reported(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       eval_mode="bogus",
                       weights={"lambda_cycle": -1.0},
                       phases={"patch_size": [50, 50, 50], "learning_rate": 0.0})
        violations = validate_config(p)
        assert len(violations) >= 4
        joined = "\n".join(violations)
        for field in ("eval_mode", "weights.lambda_cycle",
                      "phases.patch_size", "phases.learning_rate"):
            assert field in joined

    def test_unknown_field(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", phases={"warmup": 3})
        assert any("unknown field" in v for v in validate_config(p))

    def test_seven_label_needs_seven_labels(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", eval_mode="seven_label")
        assert any("n_labels == 7" in v for v in validate_config(p))

    def test_missing_data_dir(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", data={
            "source": "directory",
            "domain_a": {"dir": "nope_a"},
            "domain_b": {"dir": "nope_b"},
        })
        violations = validate_config(p)
        assert sum("does not exist" in v for v in violations) == 2

    def test_phantom_shape_multiple_of_32(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       data={"phantom": {"shape": [30, 32, 32], "per_domain": 2}})
        assert any("multiple of 32" in v for v in validate_config(p))

    def test_elastic_guard_at_phantom_scale(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       augment={"elastic_grid": [7, 7, 7],
                                "elastic_max_displacement": 8.0})
        assert any("fold-over" in v for v in validate_config(p))

    def test_version_mismatch(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml", config_version=99)
        assert any("config_version" in v for v in validate_config(p))

    def test_unparseable_raises(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: [unclosed")
        with pytest.raises(ValidationError, match="unparseable"):
            validate_config(p)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            validate_config(tmp_path / "absent.yaml")

    def test_load_config_raises_with_all_violations(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       weights={"lambda_cycle": -1.0},
                       phases={"patch_size": [50, 50, 50]})
        with pytest.raises(ValidationError) as err:
            load_config(p)
        assert "lambda_cycle" in str(err.value)
        assert "patch_size" in str(err.value)

    def test_paths_resolve_against_config_dir(self, tmp_path):
        sub = tmp_path / "nested"
        sub.mkdir()
        cfg = load_config(_write_cfg(sub / "c.yaml", output_dir="out/run"))
        assert cfg.output_dir == sub / "out" / "run"

    def test_bad_crop_boxes(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       data={"crops": {"s1": [4, 2, 0, 8, 0, 8],
                                       "s2": [0, 8, 0, 8, 0]}})
        violations = validate_config(p)
        assert any("crops.s1" in v for v in violations)
        assert any("crops.s2" in v for v in violations)


class TestWorkflowStages:
    def test_preprocess_split_and_normalization(self, tmp_path):
        cfg = load_config(_write_cfg(
            tmp_path / "c.yaml",
            data={"phantom": {"shape": [32, 32, 32], "per_domain": 4}}))
        manifest_path = workflow.stage_preprocess(cfg)
        manifest = json.loads(manifest_path.read_text())
        for key in ("A", "B"):
            records = manifest["domains"][key]
            assert [r["split"] for r in records] == ["train", "train", "train", "val"]
        vol = read_volume(manifest_path.parent / manifest["domains"]["A"][0]["img"])
        assert -1.0 <= float(vol.data.min()) and float(vol.data.max()) <= 1.0

    def test_load_dataset_split_filter(self, tmp_path):
        cfg = load_config(_write_cfg(tmp_path / "c.yaml"))
        workflow.stage_preprocess(cfg)
        train = workflow.load_dataset(cfg, split="train")
        val = workflow.load_dataset(cfg, split="val")
        both = workflow.load_dataset(cfg)
        assert len(train[Domain.A]) == 1 and len(val[Domain.A]) == 1
        assert len(both[Domain.B]) == 2

    def test_augment_uses_training_split_only(self, tmp_path):
        cfg = load_config(_write_cfg(
            tmp_path / "c.yaml", augment={"n_outputs": 6},
            data={"phantom": {"shape": [32, 32, 32], "per_domain": 4}}))
        workflow.stage_preprocess(cfg)
        manifest = json.loads(workflow.stage_augment(cfg).read_text())
        train_names = {r["name"]
                       for d in ("A", "B")
                       for r in json.loads(
                           (workflow.RunPaths(cfg).data / "manifest.json").read_text()
                       )["domains"][d] if r["split"] == "train"}
        assert all(r["source"] in train_names for r in manifest["outputs"])

    def test_gan_before_seg_is_phase_ordering_error(self, tmp_path):
        cfg = load_config(_write_cfg(tmp_path / "c.yaml"))
        workflow.stage_preprocess(cfg)
        workflow.stage_augment(cfg)
        with pytest.raises(ValidationError, match="train-seg"):
            workflow.stage_train_gan(cfg)

    def test_directory_source_with_label_remap(self, tmp_path):
        rng = np.random.default_rng(0)
        for sub in ("raw/a", "raw/b"):
            d = tmp_path / sub
            d.mkdir(parents=True)
            for name in ("s0", "s1"):
                labels = np.zeros((32, 32, 32), dtype=np.int16)
                labels[8:16, 8:16, 8:16] = 820
                labels[20:26, 20:26, 20:26] = 500
                write_volume(Volume(rng.normal(size=(32, 32, 32)).astype(np.float32)),
                             d / f"{name}_img.nii.gz")
                write_labelmap(LabelMap(labels, label_set=((820, "r820"), (500, "r500"))),
                               d / f"{name}_lbl.nii.gz")
        cfg = load_config(_write_cfg(
            tmp_path / "c.yaml",
            data={"source": "directory",
                  "domain_a": {"dir": "raw/a"}, "domain_b": {"dir": "raw/b"},
                  "label_map": {820: 1, 500: 3},
                  "phantom": None}))
        workflow.stage_preprocess(cfg)
        pools = workflow.load_dataset(cfg)
        lbls = pools[Domain.A][0].labels
        assert set(np.unique(lbls.data)) == {0, 1, 3}
        assert lbls.id_for("AA") == 1 and lbls.id_for("LVC") == 3

    def test_directory_source_crop(self, tmp_path):
        d = tmp_path / "raw"
        for sub in ("a", "b"):
            (d / sub).mkdir(parents=True)
            labels = np.zeros((48, 48, 48), dtype=np.int16)
            labels[10:20, 10:20, 10:20] = 1
            write_volume(Volume(np.ones((48, 48, 48), dtype=np.float32)),
                         d / sub / "s0_img.nii.gz")
            write_labelmap(LabelMap(labels), d / sub / "s0_lbl.nii.gz")
        cfg = load_config(_write_cfg(
            tmp_path / "c.yaml",
            data={"source": "directory",
                  "domain_a": {"dir": "raw/a"}, "domain_b": {"dir": "raw/b"},
                  "crops": {"s0": [0, 32, 0, 32, 0, 32]},
                  "phantom": None}))
        workflow.stage_preprocess(cfg)
        pools = workflow.load_dataset(cfg)
        assert pools[Domain.A][0].volume.shape == (32, 32, 32)

    def test_output_dir_env_override(self, tmp_path, monkeypatch):
        cfg = load_config(_write_cfg(tmp_path / "c.yaml"))
        monkeypatch.setenv(workflow.OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
        assert workflow.RunPaths(cfg).root == tmp_path / "elsewhere"

    def test_run_all_skips_gan_without_synthesized(self, tmp_path):
        cfg = load_config(_write_cfg(
            tmp_path / "c.yaml",
            ablations={"use_synthesized": False}))
        reports = workflow.run_all(cfg)
        paths = workflow.RunPaths(cfg)
        assert not paths.synthesized.exists()
        assert not (paths.checkpoints / "generator_ab.pt").exists()
        assert len(reports) == 2

    def test_run_all_deterministic_reports_and_logs(self, tmp_path):
        outputs = []
        for run in ("r1", "r2"):
            cfg = load_config(_write_cfg(tmp_path / f"{run}.yaml",
                                         output_dir=f"out_{run}"))
            workflow.run_all(cfg)
            paths = workflow.RunPaths(cfg)
            blob = b"".join(
                p.read_bytes() for p in (
                    paths.reports / "final_four_label.json",
                    paths.reports / "final_four_label.csv",
                    paths.logs / "phase1.jsonl",
                    paths.logs / "phase2.jsonl",
                    paths.logs / "phase3.jsonl",
                ))
            outputs.append(blob)
        assert outputs[0] == outputs[1]


@pytest.fixture(scope="module")
def seven_label_run(tmp_path_factory):
    """One tiny seven-label run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_run")
    cfg_path = _write_cfg(root / "c.yaml",
                          eval_mode="seven_label",
                          data={"n_labels": 7,
                                "phantom": {"shape": [32, 32, 32], "per_domain": 2}})
    result = CliRunner().invoke(cli, ["run-all", "--config", str(cfg_path)])
    return cfg_path, root / "run", result


class TestCli:
    def test_validate_clean(self):
        result = CliRunner().invoke(cli, ["validate", "--config", DESK_CONFIG])
        assert result.exit_code == 0
        assert "config ok" in result.output

    def test_validate_bad_config_exits_2(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml",
                       weights={"lambda_cycle": -1.0},
                       phases={"patch_size": [50, 50, 50]})
        result = CliRunner().invoke(cli, ["validate", "--config", str(p)])
        assert result.exit_code == 2
        assert "lambda_cycle" in result.output
        assert "patch_size" in result.output

    def test_unknown_subcommand_exits_2(self):
        result = CliRunner().invoke(cli, ["frobnicate"])
        assert result.exit_code == 2

    def test_missing_config_option_exits_2(self):
        result = CliRunner().invoke(cli, ["preprocess"])
        assert result.exit_code == 2

    def test_train_gan_before_train_seg_exits_2(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml")
        runner = CliRunner()
        assert runner.invoke(cli, ["preprocess", "--config", str(p)]).exit_code == 0
        assert runner.invoke(cli, ["augment", "--config", str(p)]).exit_code == 0
        result = runner.invoke(cli, ["train-gan", "--config", str(p)])
        assert result.exit_code == 2
        assert "train-seg" in result.output

    def test_run_all_completes(self, seven_label_run):
        _, out_dir, result = seven_label_run
        assert result.exit_code == 0, result.output
        assert "mean" in result.output
        assert (out_dir / "reports" / "final_seven_label.json").exists()

    def test_evaluate_four_label_mode_on_seven_label_run(self, seven_label_run):
        cfg_path, out_dir, _ = seven_label_run
        result = CliRunner().invoke(
            cli, ["evaluate", "--config", str(cfg_path), "--mode", "four_label"])
        assert result.exit_code == 0, result.output
        report = json.loads(
            (out_dir / "reports" / "final_four_label.json").read_text())
        assert all(sorted(r["per_label"]) == ["AA", "LAC", "LVC", "MYO"]
                   for r in report)
        for name in ("RAC", "RVC", "PA"):
            assert name not in result.output

    def test_phantom_generate(self, tmp_path):
        args = ["phantom", "generate", "--out", str(tmp_path / "ph"),
                "--shape", "32,32,32", "--n-labels", "7", "--per-domain", "2",
                "--seed", "3"]
        result = CliRunner().invoke(cli, args)
        assert result.exit_code == 0, result.output
        manifest = json.loads((tmp_path / "ph" / "manifest.json").read_text())
        assert len(manifest["outputs"]) == 4
        for r in manifest["outputs"]:
            assert (tmp_path / "ph" / r["img"]).exists()
            assert (tmp_path / "ph" / r["lbl"]).exists()
        vol = read_volume(tmp_path / "ph" / manifest["outputs"][0]["img"])
        assert vol.shape == (32, 32, 32)

    def test_phantom_generate_deterministic(self, tmp_path):
        blobs = []
        for run in ("p1", "p2"):
            args = ["phantom", "generate", "--out", str(tmp_path / run),
                    "--per-domain", "1", "--seed", "5"]
            assert CliRunner().invoke(cli, args).exit_code == 0
            blobs.append(b"".join(
                p.read_bytes() for p in sorted((tmp_path / run).rglob("*.nii.gz"))))
        assert blobs[0] == blobs[1]

    def test_phantom_generate_bad_shape_exits_2(self, tmp_path):
        result = CliRunner().invoke(
            cli, ["phantom", "generate", "--out", str(tmp_path / "x"),
                  "--shape", "32,32"])
        assert result.exit_code == 2

    def test_synthesize_before_gan_exits_2(self, tmp_path):
        p = _write_cfg(tmp_path / "c.yaml")
        runner = CliRunner()
        assert runner.invoke(cli, ["preprocess", "--config", str(p)]).exit_code == 0
        assert runner.invoke(cli, ["augment", "--config", str(p)]).exit_code == 0
        result = runner.invoke(cli, ["synthesize", "--config", str(p)])
        assert result.exit_code == 2
        assert "train-gan" in result.output
