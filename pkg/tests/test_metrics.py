import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slideqc import experts, metrics
from slideqc.metrics import (
    ComplexityProfile,
    ConfusionCounts,
    classification_metrics,
    cohen_kappa,
    confusion_from_labels,
    dice,
    hs_stats,
    model_complexity,
    throughput_bench,
    write_hs_csv,
)
from slideqc.wsi_store import PatchRecord
from tests.conftest import flat_patch


class TestConfusion:
    def test_positive_is_artifact_free(self):
        predicted = np.array([0, 0, 3, 1, 0])
        truth = np.array([0, 2, 3, 0, 0])
        counts = confusion_from_labels(predicted, truth, positive_label=0)
        assert (counts.tp, counts.fp, counts.tn, counts.fn) == (2, 1, 1, 1)

    def test_metrics_from_fixed_counts(self):
        summary = classification_metrics(ConfusionCounts(tp=8, fp=2, tn=5, fn=1))
        assert summary["accuracy"] == pytest.approx(13 / 16)
        assert summary["sensitivity"] == pytest.approx(8 / 9)
        assert summary["specificity"] == pytest.approx(5 / 7)
        assert summary["precision"] == pytest.approx(8 / 10)
        expected_f1 = 2 * (8 / 10) * (8 / 9) / ((8 / 10) + (8 / 9))
        assert summary["f1"] == pytest.approx(expected_f1)

    def test_undefined_ratios_are_omitted(self):
        summary = classification_metrics(ConfusionCounts(tp=0, fp=0, tn=4, fn=0))
        assert "sensitivity" not in summary
        assert "precision" not in summary
        assert "f1" not in summary
        assert summary["specificity"] == 1.0

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)


class TestDice:
    def test_identical_masks(self):
        mask = np.array([True, False, True])
        assert dice(mask, mask) == 1.0

    def test_disjoint_masks(self):
        assert dice(np.array([True, False]), np.array([False, True])) == 0.0

    def test_both_empty_is_perfect(self):
        empty = np.zeros(4, dtype=bool)
        assert dice(empty, empty) == 1.0

    def test_known_overlap(self):
        a = np.array([True, True, True, False])
        b = np.array([True, True, False, True])
        assert dice(a, b) == pytest.approx(2 * 2 / (3 + 3))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3, bool), np.zeros(4, bool))


label_arrays = hnp.arrays(
    np.int64, st.integers(2, 60), elements=st.integers(0, 5)
)


class TestKappa:
    @given(label_arrays)
    def test_self_agreement_is_one(self, labels):
        assert cohen_kappa(labels, labels) == 1.0

    @given(label_arrays, label_arrays.filter(lambda a: len(a) >= 2))
    def test_relabeling_invariance(self, a, b):
        n = min(len(a), len(b))
        a, b = a[:n], b[:n]
        permutation = np.array([3, 5, 0, 2, 4, 1])
        assert cohen_kappa(permutation[a], permutation[b]) == pytest.approx(
            cohen_kappa(a, b)
        )

    def test_textbook_two_rater_example(self):
        # 20 each in agreement on both classes, 10 each disagreement:
        # p_o = 0.4 + 0.3 = 0.7 with balanced marginals p_e = 0.5
        a = np.array([0] * 20 + [0] * 5 + [1] * 10 + [1] * 15)
        b = np.array([0] * 20 + [1] * 5 + [0] * 10 + [1] * 15)
        p_o = 35 / 50
        p_a0, p_b0 = 25 / 50, 30 / 50
        p_e = p_a0 * p_b0 + (1 - p_a0) * (1 - p_b0)
        assert cohen_kappa(a, b) == pytest.approx((p_o - p_e) / (1 - p_e))

    def test_constant_raters_in_full_agreement(self):
        ones = np.ones(10, dtype=np.int64)
        assert cohen_kappa(ones, ones) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cohen_kappa(np.array([]), np.array([]))


class TestComplexity:
    def test_trained_model_parameter_count(self):
        model = experts.ExpertModel(
            kind=experts.KIND_TRAINED, class_count=2,
            weights=np.zeros((2, 17)),
        )
        params, flops = model_complexity(model)
        assert params == 34
        assert flops == 2 * 34 + 10 * 224 * 224

    def test_external_model_echoes_manifest(self):
        model = experts.ExpertModel(
            kind=experts.KIND_EXTERNAL, class_count=2,
            manifest={"param_count": 17_650_000, "flop_count": 1_130_000_000},
        )
        assert model_complexity(model) == (17_650_000, 1_130_000_000)


class TestThroughput:
    def test_measures_positive_rate(self):
        model = experts.ExpertModel(
            kind=experts.KIND_TRAINED, class_count=2,
            weights=np.zeros((2, 17)),
        )
        patches = [flat_patch((100, 100, 100)) for _ in range(3)]
        profile = throughput_bench(model, patches, repeats=2, name="zeros")
        assert isinstance(profile, ComplexityProfile)
        assert profile.name == "zeros"
        assert profile.throughput_pps > 0

    def test_empty_patch_list_rejected(self):
        model = experts.ExpertModel(
            kind=experts.KIND_TRAINED, class_count=2,
            weights=np.zeros((2, 17)),
        )
        with pytest.raises(ValueError):
            throughput_bench(model, [], repeats=1)


class TestHueSaturation:
    def test_stats_on_known_patches(self, tmp_path):
        red = PatchRecord("s", 0, 0, flat_patch((255, 0, 0)))
        gray = PatchRecord("s", 224, 0, flat_patch((128, 128, 128)))
        rows, summary = hs_stats([red, gray])
        assert rows[0][0] == "s_0_0"
        assert rows[0][1] == pytest.approx(0.0)
        assert rows[0][2] == pytest.approx(1.0)
        assert rows[1][2] == pytest.approx(0.0)
        assert summary["n_patches"] == 2
        assert summary["sat_mean"] == pytest.approx(0.5)

        path = tmp_path / "hs.csv"
        write_hs_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "patch_id,mean_hue,mean_sat"
        assert len(lines) == 3

    def test_distinct_tints_separate_by_three_stds(self):
        # two cohorts built around different stain tints must land at
        # summary means more than three combined stds apart on each axis
        rng = np.random.default_rng(77)

        def cohort(hue_center, sat_center):
            patches = []
            for _ in range(20):
                hue = hue_center + rng.uniform(-4.0, 4.0)
                sat = sat_center + rng.uniform(-0.02, 0.02)
                val = 0.75
                c = val * sat
                x = c * (1 - abs((hue / 60.0) % 2 - 1))
                m = val - c
                sector = int(hue // 60) % 6
                rgb_unit = [
                    (c, x, 0), (x, c, 0), (0, c, x),
                    (0, x, c), (x, 0, c), (c, 0, x),
                ][sector]
                rgb = tuple(int(round((u + m) * 255)) for u in rgb_unit)
                patches.append(flat_patch(rgb, size=16))
            return hs_stats(patches)[1]

        pink = cohort(325.0, 0.40)
        teal = cohort(185.0, 0.15)
        for axis in ("hue", "sat"):
            gap = abs(pink[f"{axis}_mean"] - teal[f"{axis}_mean"])
            combined = np.hypot(pink[f"{axis}_std"], teal[f"{axis}_std"])
            assert gap > 3 * combined
