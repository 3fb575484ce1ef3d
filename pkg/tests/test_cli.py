import json
import os

import numpy as np
import pytest

from anonypose.cli import (
    REPORT_COLUMNS, cmd_anonymize, cmd_recover, cmd_report, cmd_train,
    load_experiment_config, main,
)
from anonypose.datasets import export_coco_keypoints, synth_generate
from anonypose.domain import ImageBuffer


def experiment_doc(output_dir, **overrides):
    doc = {
        "schema_version": 1,
        "run_name": "tiny",
        "output_dir": str(output_dir),
        "train": {
            "batch_size": 2, "lr0": 1e-3, "lr_pose": None, "decay": 0.99,
            "epochs": 1, "seed": 0,
            "weights": {"lambda1": 10.0, "lambda2": 10.0, "lambda3": 1.0,
                        "gate_threshold": 0.05},
            "guidance": {"method": "blur", "strength": 4},
            "generator": {"backbone": "resnet_6", "base_width": 4,
                          "in_channels": 3, "out_channels": 3},
            "discriminator": {"patch_levels": 3, "base_width": 4,
                              "conditional": True, "in_channels": 3},
            "pose": {"grid_stride": 8, "num_keypoints": 13, "base_width": 4},
            "portrait_size": [32, 32],
            "augment": False,
            "propagate_pe_to_generators": True,
            "warmup_epochs_without_pe": 0,
            "grad_clip": 10.0,
            "gate_threshold": None,
        },
        "dataset": {"kind": "synthetic", "count": 4, "canvas": [64, 64],
                    "seed": 3, "max_figures": 2, "split": [0.5, 0.25, 0.25]},
    }
    doc.update(overrides)
    return doc


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny training run shared by the anonymize/recover tests."""
    root = tmp_path_factory.mktemp("trained")
    out = root / "run"
    cfg = write_config(root, experiment_doc(out))
    assert cmd_train(cfg) == 0
    return {"out": out, "checkpoint": str(out / "checkpoint_epoch1.pt"),
            "config": cfg}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    scenes = synth_generate(2, (64, 64), seed=31, max_figures=2)
    export_coco_keypoints(scenes, root / "annotations.json", root / "images")
    return {"dir": str(root), "scenes": scenes}


class TestConfigValidation:
    def test_valid(self, tmp_path):
        cfg = write_config(tmp_path, experiment_doc(tmp_path / "o"))
        exp = load_experiment_config(cfg)
        assert exp["run_name"] == "tiny"
        assert exp["train"].batch_size == 2

    def test_dry_run(self, tmp_path, capsys):
        cfg = write_config(tmp_path, experiment_doc(tmp_path / "o"))
        assert cmd_train(cfg, dry_run=True) == 0
        assert "config OK" in capsys.readouterr().out

    def test_missing_file(self, tmp_path):
        assert cmd_train(str(tmp_path / "nope.json")) == 2

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        assert cmd_train(str(path)) == 2

    def test_unknown_top_level_key(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        doc["surprise"] = 1
        assert cmd_train(write_config(tmp_path, doc)) == 2

    def test_unknown_dataset_key(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        doc["dataset"]["flavour"] = "x"
        assert cmd_train(write_config(tmp_path, doc)) == 2

    def test_missing_required_key(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        del doc["train"]
        assert cmd_train(write_config(tmp_path, doc)) == 2

    def test_wrong_schema_version(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        doc["schema_version"] = 9
        assert cmd_train(write_config(tmp_path, doc)) == 2

    def test_bad_train_value(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        doc["train"]["lr0"] = -1.0
        assert cmd_train(write_config(tmp_path, doc)) == 2

    def test_coco_needs_paths(self, tmp_path):
        doc = experiment_doc(tmp_path / "o")
        doc["dataset"] = {"kind": "coco"}
        assert cmd_train(write_config(tmp_path, doc)) == 2


class TestTrain:
    def test_writes_metrics_and_checkpoints(self, trained):
        out = trained["out"]
        assert os.path.exists(trained["checkpoint"])
        with open(out / "metrics.json") as f:
            payload = json.load(f)
        assert payload["run"] == "tiny"
        assert payload["backbone"] == "resnet_6"
        m = payload["metrics"]
        assert {"psnr_op", "ssim_op", "psnr_or", "ssim_or",
                "map50_joint_p", "map50_joint_r"} <= set(m)
        assert (out / "train_log.jsonl").exists()


class TestAnonymize:
    def test_outputs_and_sidecar(self, trained, scene_dir, tmp_path):
        out = tmp_path / "anon"
        assert cmd_anonymize(trained["checkpoint"], scene_dir["dir"],
                             str(out)) == 0
        with open(out / "boxes.json") as f:
            sidecar = json.load(f)
        for scene in scene_dir["scenes"]:
            assert scene.id in sidecar
            assert len(sidecar[scene.id]) == len(scene.persons)
            assert (out / f"{scene.id}.png").exists()

    def test_background_bit_equal(self, trained, scene_dir, tmp_path):
        out = tmp_path / "anon"
        assert cmd_anonymize(trained["checkpoint"], scene_dir["dir"],
                             str(out)) == 0
        with open(out / "boxes.json") as f:
            sidecar = json.load(f)
        for scene in scene_dir["scenes"]:
            orig = ImageBuffer.load_png(
                os.path.join(scene_dir["dir"], "images", f"{scene.id}.png"))
            enh = ImageBuffer.load_png(out / f"{scene.id}.png")
            mask = np.ones((64, 64), dtype=bool)
            for x0, y0, x1, y1 in sidecar[scene.id]:
                mask[y0:y1, x0:x1] = False
            assert np.array_equal(enh.to_uint8()[mask], orig.to_uint8()[mask])

    def test_empty_input_dir(self, trained, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "o"
        assert cmd_anonymize(trained["checkpoint"], str(empty), str(out)) == 0
        with open(out / "boxes.json") as f:
            assert json.load(f) == {}

    def test_bad_checkpoint(self, scene_dir, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        assert cmd_anonymize(str(bad), scene_dir["dir"],
                             str(tmp_path / "o")) == 2


class TestRecover:
    def test_round_trip(self, trained, scene_dir, tmp_path):
        anon = tmp_path / "anon"
        rec = tmp_path / "rec"
        assert cmd_anonymize(trained["checkpoint"], scene_dir["dir"],
                             str(anon)) == 0
        assert cmd_recover(trained["checkpoint"], str(anon), str(rec),
                           original_dir=scene_dir["dir"]) == 0
        with open(rec / "summary.json") as f:
            summary = json.load(f)
        for scene in scene_dir["scenes"]:
            assert (rec / f"{scene.id}.png").exists()
            entry = summary[scene.id]
            assert "psnr_or" in entry
            assert float(entry["psnr_or"]) > 0

    def test_missing_sidecar(self, trained, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        assert cmd_recover(trained["checkpoint"], str(bare),
                           str(tmp_path / "r")) == 2

    def test_bad_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"junk")
        assert cmd_recover(str(bad), str(tmp_path), str(tmp_path / "r")) == 2


class TestReport:
    def test_table_and_csv(self, trained, tmp_path, capsys):
        missing = tmp_path / "missing_run"
        missing.mkdir()
        csv_path = tmp_path / "table.csv"
        assert cmd_report([str(trained["out"]), str(missing)],
                          csv_path=str(csv_path)) == 0
        out = capsys.readouterr().out
        for col in ("run", "PSNR(o,p)", "mAP@0.5_{joint,p}", "PSNR(o,r)"):
            assert col in out
        assert "tiny" in out
        assert "—" in out  # missing metrics render as a dash
        lines = csv_path.read_text().splitlines()
        assert lines[0].split(",")[0] == "run"
        assert len(lines) == 3

    def test_report_columns_schema(self):
        assert REPORT_COLUMNS[0] == "run"
        assert "SSIM(o,r)" in REPORT_COLUMNS
        assert len(REPORT_COLUMNS) == 16


class TestMain:
    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2

    def test_dry_run_via_main(self, tmp_path):
        cfg = write_config(tmp_path, experiment_doc(tmp_path / "o"))
        assert main(["train", "--config", cfg, "--dry-run"]) == 0

    def test_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ANONYPOSE_THREADS", "1")
        cfg = write_config(tmp_path, experiment_doc(tmp_path / "o"))
        assert main(["train", "--config", cfg, "--dry-run"]) == 0
