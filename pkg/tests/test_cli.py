import json

import numpy as np
import pytest

from slideqc import wsi_store
from slideqc.cli import main


def run(argv):
    return main([str(a) for a in argv])


class TestExitCodes:
    def test_missing_slide_directory(self, tmp_path, capsys):
        code = run(["infer", "--slide", tmp_path / "nope", "--oracle",
                    "--out", tmp_path / "out"])
        assert code == 2
        assert "nope" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"workerz": 3}))
        code = run(["--config", config, "eval", "--results", tmp_path,
                    "--truth", tmp_path, "--out", tmp_path / "e.json"])
        assert code == 2
        assert "workerz" in capsys.readouterr().err

    def test_unknown_synth_kind(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"kind": "volume", "seed": 1}))
        assert run(["synth", "--spec", spec, "--out", tmp_path / "o"]) == 2

    def test_bad_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run(["infer", "--no-such-flag"])
        assert exc.value.code == 2


class TestSynthCommand:
    def test_slide_spec_produces_slide_directory(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "kind": "slide", "seed": 3, "width": 896, "height": 896,
            "regions": [{"class_id": 2, "target_fraction": 0.15}],
        }))
        out = tmp_path / "slide"
        assert run(["synth", "--spec", spec, "--out", out]) == 0
        for name in ("manifest.json", "slide.png", "annotations.json", "truth.png"):
            assert (out / name).is_file()


class TestTileCommand:
    def test_annotated_slide_yields_labeled_patches(self, tiny_slide_dir, tmp_path):
        out = tmp_path / "tiles"
        assert run(["tile", "--slide", tiny_slide_dir, "--out", out]) == 0
        assert (out / "plan.json").is_file()
        counts = {
            name: len(list((out / "patches" / name).glob("*.png")))
            for name in wsi_store.CLASS_NAMES
        }
        assert counts["artifact_free"] > 0
        assert all(counts[name] >= 1 for name in wsi_store.CLASS_NAMES)

    def test_unannotated_slide_yields_flat_patches(self, tiny_slide_dir, tmp_path):
        bare = tmp_path / "bare"
        slide = wsi_store.load_slide(tiny_slide_dir)
        manifest = wsi_store.SlideManifest(
            slide_id=slide.manifest.slide_id,
            width_px=slide.manifest.width_px,
            height_px=slide.manifest.height_px,
            magnification=slide.manifest.magnification,
            pixel_size_um=slide.manifest.pixel_size_um,
            raster_path="slide.png",
        )
        wsi_store.save_slide(bare, manifest, slide.image)
        out = tmp_path / "tiles"
        assert run(["tile", "--slide", bare, "--out", out]) == 0
        assert len(list((out / "unlabeled").glob("*.png"))) > 0


class TestTrainCommand:
    def test_creates_missing_output_directories(self, mini_corpus, tmp_path):
        root, _ = mini_corpus
        out = tmp_path / "not" / "yet" / "blood.json"
        assert run(["train", "--patches", root, "--task", "blood",
                    "--out", out, "--seed", "1"]) == 0
        assert out.is_file()


class TestInferCommand:
    def test_oracle_writes_all_outputs(self, tiny_slide_dir, tmp_path):
        out = tmp_path / "results"
        assert run(["infer", "--slide", tiny_slide_dir, "--oracle",
                    "--out", out]) == 0
        for name in ("decisions.jsonl", "report.json", "seg_map.png",
                     "roi_mask.png", "masked_slide.png"):
            assert (out / name).is_file()
        report = json.loads((out / "report.json").read_text())
        assert report["throughput_pps"] is None
        assert report["verdict"] in ("accept", "discard")

    def test_models_required_without_oracle(self, tiny_slide_dir, tmp_path):
        assert run(["infer", "--slide", tiny_slide_dir,
                    "--out", tmp_path / "x"]) == 2

    def test_tau_flag_overrides_config_file(self, tiny_slide_dir, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"tau": 0.9}))
        out_config = tmp_path / "by_config"
        out_flag = tmp_path / "by_flag"
        assert run(["--config", config, "infer", "--slide", tiny_slide_dir,
                    "--oracle", "--out", out_config]) == 0
        assert run(["--config", config, "infer", "--slide", tiny_slide_dir,
                    "--oracle", "--tau", "0.1", "--out", out_flag]) == 0
        assert json.loads((out_config / "report.json").read_text())["tau"] == 0.9
        assert json.loads((out_flag / "report.json").read_text())["tau"] == 0.1

    def test_workers_env_fallback(self, tiny_slide_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("SLIDEQC_WORKERS", "2")
        out = tmp_path / "env_workers"
        assert run(["infer", "--slide", tiny_slide_dir, "--oracle",
                    "--out", out]) == 0
        monkeypatch.setenv("SLIDEQC_WORKERS", "zebra")
        assert run(["infer", "--slide", tiny_slide_dir, "--oracle",
                    "--out", tmp_path / "bad_env"]) == 2

    def test_masked_slide_blanks_artifact_cells(self, tiny_slide_dir, tmp_path):
        out = tmp_path / "results"
        assert run(["infer", "--slide", tiny_slide_dir, "--oracle",
                    "--fill", "white", "--out", out]) == 0
        masked = wsi_store.load_raster(out / "masked_slide.png")
        mask = wsi_store.load_label_raster(out / "roi_mask.png") > 0
        assert (masked[~mask] == 255).all()


class TestEvalCommand:
    def test_oracle_results_score_perfectly(self, tiny_slide_dir, tmp_path):
        results = tmp_path / "results"
        assert run(["infer", "--slide", tiny_slide_dir, "--oracle",
                    "--out", results]) == 0
        out = tmp_path / "eval.json"
        assert run(["eval", "--results", results, "--truth", tiny_slide_dir,
                    "--out", out]) == 0
        scores = json.loads(out.read_text())
        assert scores["dice"] == 1.0
        assert scores["kappa"] == 1.0

    def test_missing_decisions_is_usage_error(self, tiny_slide_dir, tmp_path):
        assert run(["eval", "--results", tmp_path, "--truth", tiny_slide_dir,
                    "--out", tmp_path / "e.json"]) == 2


class TestBenchCommand:
    def test_table_lists_trained_model(self, tmp_path, capsys):
        from slideqc import experts
        models = tmp_path / "models"
        models.mkdir()
        model = experts.ExpertModel(
            kind=experts.KIND_TRAINED, class_count=2,
            weights=np.zeros((2, experts.FEATURE_DIM + 1)),
        )
        experts.save_model(model, models / "blood.json")
        patches = tmp_path / "patches"
        patches.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            wsi_store.save_raster(
                patches / f"p_{i}_0.png",
                rng.integers(0, 256, (224, 224, 3), dtype=np.uint8),
            )
        assert run(["bench", "--models", models, "--patches", patches,
                    "--repeats", "2"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].split("\t") == [
            "model", "param_count", "flop_count", "throughput_pps"
        ]
        row = lines[1].split("\t")
        assert row[0] == "blood"
        assert row[1] == "34"
        assert float(row[3]) > 0
