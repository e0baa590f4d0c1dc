import json
import os
from pathlib import Path

import numpy as np
import pytest

from defectnet import cli
from defectnet.config import ConfigError, load_run_config
from defectnet.pngio import load_labels, save_image

MINI = {
    "profile": "desk",
    "seed": 0,
    "data": {
        "scenes": 10,
        "image_size": 64,
        "num_classes": 3,
        "ratios": [100, 30, 2],
        "presence": [1.0],
        "noise_sigma": 0.06,
        "train_fraction": 0.8,
    },
    "model": {
        "widths": [4, 6, 8, 8, 8],
        "dilated_width": 8,
    },
    "train": {
        "learning_rate": 2e-3,
        "batch_size": 2,
        "epochs": 2,
        "steps_per_epoch": 3,
        "weight_scale": 3.0,
    },
    "patch": {
        "patch_size": 32,
        "train_stride": 16,
        "infer_overlap": 16,
    },
    "eval": {
        "defect_class_ids": [2],
        "ablate_seeds": [0],
    },
}


@pytest.fixture(scope="module")
def mini_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mini.json"
    path.write_text(json.dumps(MINI))
    return str(path)


@pytest.fixture(scope="module")
def corpus(mini_config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["gen-data", "--config", mini_config_path, "--out", str(out), "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(mini_config_path, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = cli.main(
        ["train", "--config", mini_config_path, "--data", str(corpus), "--out", str(out)]
    )
    assert rc == 0
    return out


class TestConfig:
    def test_profile_defaults_load(self):
        cfg = load_run_config()
        assert cfg.profile == "desk"
        assert cfg.raw["patch"]["patch_size"] == 64

    def test_paper_profile_values(self):
        cfg = load_run_config({"profile": "paper"})
        assert cfg.raw["patch"] == {
            "patch_size": 400,
            "train_stride": 20,
            "infer_overlap": 200,
            "min_distinct_classes": 3,
        }
        assert cfg.raw["train"]["batch_size"] == 10
        assert cfg.raw["model"]["widths"] == [64, 128, 256, 512, 512]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key: data.bogus"):
            load_run_config({"data": {"bogus": 1}})

    def test_overrides_and_seed(self):
        cfg = load_run_config(MINI, {"seed": 9, "train.loss": "wce"})
        assert cfg.seed == 9
        assert cfg.train_config().loss == "wce"
        assert cfg.train_config().seed == 9

    def test_invalid_values_are_config_errors(self):
        with pytest.raises(ConfigError):
            load_run_config({"data": {"scenes": 0}})
        with pytest.raises(ConfigError):
            load_run_config({"train": {"loss": "focal"}})
        with pytest.raises(ConfigError):
            load_run_config({"eval": {"defect_class_ids": [0]}})

    def test_config_hash_stable(self):
        a = load_run_config(MINI).config_hash()
        b = load_run_config(json.loads(json.dumps(MINI))).config_hash()
        assert a == b


class TestGenData:
    def test_outputs_and_manifest(self, corpus):
        manifest = json.loads((corpus / "manifest.json").read_text())
        assert len(manifest["scenes"]) == 10
        for entry in manifest["scenes"]:
            assert (corpus / entry["image"]).exists()
            assert (corpus / entry["labels"]).exists()
        labels = load_labels(corpus / manifest["scenes"][0]["labels"])
        assert labels.shape == (64, 64)
        assert set(np.unique(labels)) <= {0, 1, 2}

    def test_same_seed_byte_identical(self, mini_config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["gen-data", "--config", mini_config_path, "--out", str(a)]) == 0
        assert cli.main(["gen-data", "--config", mini_config_path, "--out", str(b)]) == 0
        for name in sorted(os.listdir(a)):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_scenes_is_validation_error(self, mini_config_path, tmp_path, capsys):
        rc = cli.main(
            ["gen-data", "--config", mini_config_path, "--out", str(tmp_path / "x"), "--scenes", "0"]
        )
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"

    def test_refuses_nonempty_without_force(self, mini_config_path, corpus):
        assert cli.main(["gen-data", "--config", mini_config_path, "--out", str(corpus)]) == 1

    def test_unknown_flag_is_validation_error(self):
        assert cli.main(["gen-data", "--out", "/tmp/x", "--wat"]) == 1


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "checkpoint.dnet").exists()
        rows = [json.loads(l) for l in (trained / "history.jsonl").read_text().splitlines()]
        assert len(rows) == 6  # 2 epochs x 3 steps
        for row in rows:
            assert "gamma" in row and row["gamma"] is not None
        manifest_lines = (trained / "patches.jsonl").read_text().splitlines()
        for line in manifest_lines:
            rec = json.loads(line)
            assert set(rec) == {"source", "origin"}

    def test_loss_selection_changes_history(self, mini_config_path, corpus, tmp_path):
        hists = {}
        for loss in ("ce", "wce"):
            out = tmp_path / loss
            rc = cli.main(
                ["train", "--config", mini_config_path, "--data", str(corpus),
                 "--out", str(out), "--loss", loss]
            )
            assert rc == 0
            hists[loss] = (out / "history.jsonl").read_text()
        assert hists["ce"] != hists["wce"]

    def test_resume_matches_uninterrupted(self, mini_config_path, corpus, tmp_path):
        cfg4 = json.loads(Path(mini_config_path).read_text())
        cfg4["train"]["epochs"] = 4
        cfg4_path = tmp_path / "cfg4.json"
        cfg4_path.write_text(json.dumps(cfg4))

        full = tmp_path / "full"
        assert cli.main(["train", "--config", str(cfg4_path), "--data", str(corpus), "--out", str(full)]) == 0

        part = tmp_path / "part"
        assert cli.main(["train", "--config", mini_config_path, "--data", str(corpus), "--out", str(part)]) == 0
        # continue the 2-epoch checkpoint out to 4 epochs
        cfg4b = tmp_path / "cfg4b.json"
        cfg4b.write_text(json.dumps(cfg4))
        assert cli.main(["train", "--config", str(cfg4b), "--data", str(corpus), "--out", str(part), "--resume"]) == 0

        assert (part / "history.jsonl").read_bytes() == (full / "history.jsonl").read_bytes()
        assert (part / "checkpoint.dnet").read_bytes() == (full / "checkpoint.dnet").read_bytes()

    def test_resume_without_checkpoint_fails(self, mini_config_path, corpus, tmp_path):
        rc = cli.main(
            ["train", "--config", mini_config_path, "--data", str(corpus),
             "--out", str(tmp_path / "none"), "--resume"]
        )
        assert rc == 1


class TestPredictEval:
    def test_predict_outputs(self, mini_config_path, corpus, trained, tmp_path):
        manifest = json.loads((corpus / "manifest.json").read_text())
        image_path = corpus / manifest["scenes"][0]["image"]
        out = tmp_path / "pred"
        rc = cli.main(
            ["predict", "--config", mini_config_path, "--model", str(trained / "checkpoint.dnet"),
             "--image", str(image_path), "--out", str(out)]
        )
        assert rc == 0
        stem = image_path.stem
        labels = load_labels(out / f"{stem}_pred_labels.png")
        assert labels.shape == (64, 64)
        assert labels.min() >= 0 and labels.max() < 3
        probs = np.load(out / f"{stem}_probs.npy")
        assert probs.shape == (3, 64, 64)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-9)

    def test_eval_metrics(self, mini_config_path, corpus, trained, tmp_path):
        manifest = json.loads((corpus / "manifest.json").read_text())
        pred_dir = tmp_path / "pred"
        images = [str(corpus / e["image"]) for e in manifest["scenes"][:3]]
        rc = cli.main(
            ["predict", "--config", mini_config_path, "--model", str(trained / "checkpoint.dnet"),
             "--image", *images, "--out", str(pred_dir)]
        )
        assert rc == 0
        metrics_path = tmp_path / "metrics.json"
        rc = cli.main(
            ["eval", "--config", mini_config_path, "--data", str(corpus),
             "--pred", str(pred_dir), "--out", str(metrics_path)]
        )
        assert rc == 0
        report = json.loads(metrics_path.read_text())
        assert report["scenes_evaluated"] == 3
        assert len(report["per_class_recall"]) == 3

    def test_eval_with_no_matches_fails(self, mini_config_path, corpus, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = cli.main(
            ["eval", "--config", mini_config_path, "--data", str(corpus),
             "--pred", str(empty), "--out", str(tmp_path / "m.json")]
        )
        assert rc == 1

    def test_missing_model_is_runtime_error(self, mini_config_path, corpus, tmp_path):
        manifest = json.loads((corpus / "manifest.json").read_text())
        rc = cli.main(
            ["predict", "--config", mini_config_path, "--model", str(tmp_path / "missing.dnet"),
             "--image", str(corpus / manifest["scenes"][0]["image"]), "--out", str(tmp_path / "p")]
        )
        assert rc == 2

    def test_training_improves_defect_recall_over_untrained(
        self, mini_config_path, corpus, trained, tmp_path
    ):
        from defectnet.cli import evaluate_on_scenes, load_model_weights
        from defectnet.model import DefectNet

        cfg = load_run_config(json.loads(Path(mini_config_path).read_text()))
        manifest = json.loads((corpus / "manifest.json").read_text())
        train_scene_ids = json.loads((trained / "split.json").read_text())["train"][:3]

        untrained = DefectNet(cfg.model_config(), seed=cfg.seed)
        cm_before = evaluate_on_scenes(untrained, cfg, manifest, corpus, train_scene_ids)

        model = DefectNet(cfg.model_config(), seed=cfg.seed)
        load_model_weights(model, trained / "checkpoint.dnet")
        cm_after = evaluate_on_scenes(model, cfg, manifest, corpus, train_scene_ids)

        # overall pixel accuracy must move up even after a short run
        acc_before = np.trace(cm_before.counts) / cm_before.total
        acc_after = np.trace(cm_after.counts) / cm_after.total
        assert acc_after > acc_before


class TestAblate:
    def test_schema_and_determinism(self, mini_config_path, corpus, tmp_path):
        out = tmp_path / "abl"
        rc = cli.main(
            ["ablate", "--config", mini_config_path, "--data", str(corpus), "--out", str(out)]
        )
        assert rc == 0
        summary = json.loads((out / "ablation.json").read_text())
        assert [row["loss"] for row in summary["rows"]] == ["ce", "wce", "gdice", "hybrid"]
        csv_lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 5  # header + 4 loss rows
        assert csv_lines[0].split(",") == ["loss", "class_0", "class_1", "class_2", "defect_average"]
        for line in csv_lines[1:]:
            assert len(line.split(",")) == 4 + 1  # loss + K + defect average

    def test_requires_corpus(self, mini_config_path, tmp_path):
        rc = cli.main(
            ["ablate", "--config", mini_config_path, "--data", str(tmp_path / "nope"),
             "--out", str(tmp_path / "abl")]
        )
        assert rc == 1

    def test_dnet_threads_validation(self, monkeypatch):
        monkeypatch.setenv("DNET_THREADS", "abc")
        with pytest.raises(ConfigError):
            cli.worker_count()
        monkeypatch.setenv("DNET_THREADS", "2")
        assert cli.worker_count() == 2


class TestErrorStream:
    def test_single_line_json_error(self, capsys):
        rc = cli.main(["train", "--config", "/nonexistent.json", "--data", "/x", "--out", "/y"])
        assert rc == 1
        lines = capsys.readouterr().err.strip().splitlines()
        parsed = json.loads(lines[-1])
        assert parsed["error"] == "ConfigError"

    def test_no_command(self, capsys):
        assert cli.main([]) == 1
