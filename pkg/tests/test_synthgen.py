import numpy as np
import pytest

from slideqc import experts, synthgen, tiler, wsi_store
from slideqc.synthgen import (
    RegionSpec,
    SynthSpec,
    generate_patch,
    generate_slide,
    load_truth,
    split_counts,
)


class TestSplitCounts:
    def test_eleven_slides(self):
        assert split_counts(11, (0.64, 0.18, 0.18)) == (7, 2, 2)

    def test_three_slides(self):
        assert split_counts(3, (0.34, 0.33, 0.33)) == (1, 1, 1)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split_counts(10, (0.5, 0.3, 0.3))

    def test_too_few_slides(self):
        with pytest.raises(ValueError):
            split_counts(2, (0.34, 0.33, 0.33))


class TestSpecValidation:
    def test_rejects_non_grid_dimensions(self):
        with pytest.raises(ValueError):
            SynthSpec(seed=0, width=1000, height=1344)

    def test_rejects_tiny_slides(self):
        with pytest.raises(ValueError):
            SynthSpec(seed=0, width=224, height=224)

    def test_rejects_overfull_artifact_budget(self):
        regions = tuple(RegionSpec(k, 0.2) for k in range(1, 6))
        with pytest.raises(ValueError):
            SynthSpec(seed=0, regions=regions)

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            RegionSpec(class_id=0, target_fraction=0.1)


class TestGeneratedSlide:
    def test_deterministic_per_seed(self, tmp_path):
        spec = SynthSpec(seed=21, width=896, height=896,
                         regions=(RegionSpec(1, 0.1),))
        a = generate_slide(spec, tmp_path / "a")
        b = generate_slide(spec, tmp_path / "b")
        assert np.array_equal(a.image, b.image)
        assert (tmp_path / "a" / "truth.png").read_bytes() == \
            (tmp_path / "b" / "truth.png").read_bytes()

    def test_annotations_rasterize_to_truth(self, tiny_slide_dir):
        slide = wsi_store.load_slide(tiny_slide_dir)
        truth = load_truth(tiny_slide_dir)
        raster = wsi_store.rasterize_annotations(
            slide.annotations, slide.manifest.width_px, slide.manifest.height_px
        )
        assert np.array_equal(raster, truth)

    def test_artifact_areas_hit_target_band(self, tiny_slide_dir):
        truth = load_truth(tiny_slide_dir)
        tissue_area = (truth != wsi_store.UNLABELED).sum()
        for class_id in range(1, 6):
            placed = (truth == class_id).sum()
            target = 0.058 * tissue_area
            assert 0.6 * target <= placed <= 1.4 * target

    def test_foreground_tracks_tissue(self, tiny_slide_dir):
        slide = wsi_store.load_slide(tiny_slide_dir)
        truth = load_truth(tiny_slide_dir)
        fg = tiler.extract_foreground(slide.image)
        assert not fg.degenerate
        tissue_fraction = (truth != wsi_store.UNLABELED).mean()
        assert abs(fg.mask.mean() - tissue_fraction) < 0.08
        # background never reads as tissue
        assert not (fg.mask & (truth == wsi_store.UNLABELED)).any()

    def test_every_class_gets_a_labeled_cell(self, tiny_slide_dir):
        slide = wsi_store.load_slide(tiny_slide_dir)
        truth = load_truth(tiny_slide_dir)
        fg = tiler.extract_foreground(slide.image)
        plan = tiler.plan_grid(fg.mask, truth)
        labels = {c.label for c in plan.selected}
        assert {0, 1, 2, 3, 4, 5} <= labels


class TestGeneratedPatch:
    @pytest.mark.parametrize("class_id", range(6))
    def test_patch_is_mostly_its_class(self, class_id):
        patch, truth = generate_patch(class_id, seed=4)
        assert patch.pixels.shape == (224, 224, 3)
        assert patch.label == class_id
        assert (truth == class_id).mean() >= 0.7


class TestCorpus:
    def test_index_structure(self, mini_corpus):
        root, index = mini_corpus
        assert index["n_slides"] == 3
        assert [len(index["slides"][k]) for k in ("train", "val", "test")] == [1, 1, 1]
        assert (root / "corpus.json").is_file()
        for split in ("train", "val", "test"):
            for slide_id in index["slides"][split]:
                assert (root / "slides" / slide_id / "slide.png").is_file()

    def test_each_split_covers_all_classes(self, mini_corpus):
        _, index = mini_corpus
        for split in ("train", "val", "test"):
            counts = index["patch_counts"][split]
            assert all(counts[name] >= 1 for name in wsi_store.CLASS_NAMES), counts

    def test_patch_files_match_index_counts(self, mini_corpus):
        root, index = mini_corpus
        for split in ("train", "val", "test"):
            for name, count in index["patch_counts"][split].items():
                assert len(list((root / split / name).glob("*.png"))) == count


class TestLearnability:
    """The generated classes must be separable by the shipped features.

    This is the fitness bar for the generator: every binary task trained
    on the mini corpus has to reach 90 percent validation accuracy.
    """

    def test_each_binary_task_is_learnable(self, mini_corpus):
        root, _ = mini_corpus
        train_records = wsi_store.load_patch_dataset(root / "train")
        val_records = wsi_store.load_patch_dataset(root / "val")
        train_feats = np.array([experts.extract_features(p) for p in train_records])
        val_feats = np.array([experts.extract_features(p) for p in val_records])
        train_labels = np.array([p.label for p in train_records])
        val_labels = np.array([p.label for p in val_records])

        for artifact_class in range(1, 6):
            tr_keep = (train_labels == 0) | (train_labels == artifact_class)
            va_keep = (val_labels == 0) | (val_labels == artifact_class)
            y_tr = (train_labels[tr_keep] != artifact_class).astype(np.int64)
            y_va = (val_labels[va_keep] != artifact_class).astype(np.int64)
            model, _ = experts.train(
                train_feats[tr_keep], y_tr, val_feats[va_keep], y_va, 2,
                experts.TrainConfig(seed=0),
            )
            logits = val_feats[va_keep] @ model.weights[:, :-1].T \
                + model.weights[:, -1]
            accuracy = (experts.softmax(logits).argmax(axis=1) == y_va).mean()
            name = wsi_store.CLASS_NAMES[artifact_class]
            assert accuracy >= 0.9, f"{name} expert stuck at {accuracy:.3f}"
