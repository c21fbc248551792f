from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slideqc import tiler
from slideqc.tiler import (
    GridPlan,
    dominant_cell_labels,
    extract_foreground,
    extract_patches,
    grid_origins,
    otsu_threshold,
    plan_grid,
    rgb_to_hsv,
    value_channel,
)


def otsu_oracle(histogram):
    """Exhaustive reference: maximize between-class variance exactly.

    Scores every cut with rational arithmetic, so plateau ties resolve
    to the smallest threshold without any float rounding.
    """
    hist = [int(v) for v in histogram]
    nonzero = [v for v, count in enumerate(hist) if count > 0]
    if len(nonzero) == 1:
        return nonzero[0]
    total = sum(hist)
    total_sum = sum(v * count for v, count in enumerate(hist))
    best_t, best_score = None, Fraction(-1)
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += hist[t - 1]
        s0 += (t - 1) * hist[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_sum - s0
        mean_diff = Fraction(s0, n0) - Fraction(s1, n1)
        score = Fraction(n0 * n1, total * total) * mean_diff * mean_diff
        if score > best_score:
            best_score, best_t = score, t
    return best_t


histograms = st.one_of(
    st.lists(st.integers(0, 10_000), min_size=256, max_size=256),
    # sparse histograms hit plateau ties far more often
    st.lists(st.integers(0, 255), min_size=2, max_size=6, unique=True).map(
        lambda bins: [1000 if v in bins else 0 for v in range(256)]
    ),
)


class TestOtsu:
    @given(histograms)
    def test_matches_exhaustive_oracle(self, hist):
        hist = np.asarray(hist, dtype=np.int64)
        if hist.sum() == 0:
            with pytest.raises(ValueError):
                otsu_threshold(hist)
            return
        assert otsu_threshold(hist) == otsu_oracle(hist)

    def test_two_delta_peaks(self):
        hist = np.zeros(256, dtype=np.int64)
        hist[50] = 500
        hist[200] = 500
        assert otsu_threshold(hist) == 51

    def test_uniform_histogram(self):
        hist = np.full(256, 10, dtype=np.int64)
        assert otsu_threshold(hist) == otsu_oracle(hist) == 128

    def test_single_bin_returns_that_bin(self):
        hist = np.zeros(256, dtype=np.int64)
        hist[77] = 123
        assert otsu_threshold(hist) == 77

    def test_rejects_negative_counts(self):
        hist = np.zeros(256, dtype=np.int64)
        hist[0] = -1
        with pytest.raises(ValueError):
            otsu_threshold(hist)

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            otsu_threshold(np.zeros(100, dtype=np.int64))


class TestHsv:
    @pytest.mark.parametrize("rgb,expected", [
        ((255, 0, 0), (0.0, 1.0, 1.0)),
        ((0, 255, 0), (120.0, 1.0, 1.0)),
        ((0, 0, 255), (240.0, 1.0, 1.0)),
        ((255, 255, 255), (0.0, 0.0, 1.0)),
        ((0, 0, 0), (0.0, 0.0, 0.0)),
        ((128, 128, 128), (0.0, 0.0, 128 / 255)),
    ])
    def test_known_colors(self, rgb, expected):
        hue, sat, val = rgb_to_hsv(*rgb)
        assert hue == pytest.approx(expected[0])
        assert sat == pytest.approx(expected[1])
        assert val == pytest.approx(expected[2])

    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    def test_ranges(self, r, g, b):
        hue, sat, val = rgb_to_hsv(r, g, b)
        assert 0.0 <= hue < 360.0
        assert 0.0 <= sat <= 1.0
        assert 0.0 <= val <= 1.0

    def test_value_channel_is_max(self):
        image = np.array([[[10, 200, 30], [0, 0, 5]]], dtype=np.uint8)
        assert np.array_equal(value_channel(image), np.array([[200, 5]], np.uint8))


class TestForeground:
    def test_bimodal_image(self):
        image = np.full((20, 20, 3), 240, dtype=np.uint8)
        image[:10, :10] = 60  # dark tissue block
        fg = extract_foreground(image)
        assert not fg.degenerate
        assert fg.mask[:10, :10].all()
        assert not fg.mask[10:, :].any()

    def test_flat_image_is_degenerate(self):
        image = np.full((8, 8, 3), 100, dtype=np.uint8)
        fg = extract_foreground(image)
        assert fg.degenerate
        assert not fg.mask.any()


class TestGrid:
    def test_counts_full_cells_only(self):
        assert len(grid_origins(1344, 224)) == 6 * 1
        assert len(grid_origins(1567, 224)) == 6 * 1

    def test_origins_are_row_major(self):
        origins = grid_origins(448, 448)
        assert origins == [(0, 0), (224, 0), (0, 224), (224, 224)]

    def test_partial_edge_cells_are_not_planned(self):
        # a trailing sliver cannot hold a full patch, so it is never tiled
        assert grid_origins(300, 224) == [(0, 0)]

    def test_selection_by_foreground_fraction(self):
        mask = np.zeros((224, 448), dtype=bool)
        mask[:, :224] = True             # left cell fully foreground
        mask[:100, 224:] = True          # right cell 100/224 < half
        plan = plan_grid(mask, None)
        assert [(c.x, c.y) for c in plan.selected] == [(0, 0)]

    def test_labeling_needs_seventy_percent_coverage(self):
        mask = np.ones((224, 448), dtype=bool)
        raster = np.full((224, 448), 255, dtype=np.uint8)
        n = 224 * 224
        at_bar = -(-7 * n // 10)   # ceil(0.7 n): smallest count meeting the bar
        flat = raster[:, :224].reshape(-1)
        flat[:at_bar] = 1
        flat2 = raster[:, 224:].reshape(-1)
        flat2[: at_bar - 1] = 2    # one pixel short of the bar
        raster[:, :224] = flat.reshape(224, 224)
        raster[:, 224:] = flat2.reshape(224, 224)
        plan = plan_grid(mask, raster)
        labels = {(c.x, c.y): c.label for c in plan.selected}
        assert labels[(0, 0)] == 1
        # the under-covered cell is dropped entirely from a labeled plan
        assert (224, 0) not in labels

    def test_coverage_tie_prefers_smaller_class(self):
        mask = np.ones((224, 224), dtype=bool)
        raster = np.full((224, 224), 255, dtype=np.uint8)
        raster[:112, :] = 5
        raster[112:, :] = 2
        plan = plan_grid(mask, raster, min_overlap=0.5)
        assert plan.selected[0].label == 2

    def test_plan_round_trip(self, tmp_path):
        mask = np.ones((448, 448), dtype=bool)
        plan = plan_grid(mask, None)
        plan.save(tmp_path / "plan.json")
        loaded = GridPlan.load(tmp_path / "plan.json")
        assert loaded.stride == plan.stride
        assert [(c.x, c.y, c.label) for c in loaded.selected] == \
            [(c.x, c.y, c.label) for c in plan.selected]


class TestDominantLabels:
    def test_majority_wins_and_unlabeled_ignored(self):
        raster = np.full((224, 224), 255, dtype=np.uint8)
        raster[:10, :10] = 4
        raster[:10, 10:15] = 1
        labels = dominant_cell_labels(raster, [(0, 0)])
        assert labels == [4]

    def test_tie_prefers_smaller_class(self):
        raster = np.full((224, 224), 255, dtype=np.uint8)
        raster[0, :10] = 3
        raster[1, :10] = 1
        assert dominant_cell_labels(raster, [(0, 0)]) == [1]

    def test_fully_unlabeled_cell_is_none(self):
        raster = np.full((224, 224), 255, dtype=np.uint8)
        assert dominant_cell_labels(raster, [(0, 0)]) == [None]


class TestExtractPatches:
    def test_pixels_match_source(self):
        rng = np.random.default_rng(2)
        image = rng.integers(0, 256, (448, 448, 3), dtype=np.uint8)
        mask = np.zeros((448, 448), dtype=bool)
        mask[224:, :224] = True
        plan = plan_grid(mask, None)
        patches = extract_patches(image, plan, slide_id="s")
        assert len(patches) == 1
        assert (patches[0].x, patches[0].y) == (0, 224)
        assert np.array_equal(patches[0].pixels, image[224:, :224])

    def test_patch_outside_image_rejected(self):
        image = np.zeros((224, 224, 3), dtype=np.uint8)
        plan = GridPlan(stride=224, cells=(tiler.GridCell(224, 0),),
                        selected=(tiler.GridCell(224, 0),))
        with pytest.raises(ValueError):
            extract_patches(image, plan)
