"""Masking: keep-count formulas, sortedness, uniformity, multiblock
geometry, and latent-loss subsampling."""

import numpy as np
import pytest
from scipy import stats

from layerlock.masking import (
    MaskSpec,
    multiblock_mask,
    random_mask,
    subsample_latent_patches,
)


class TestSpecValidation:
    def test_default_ratio(self):
        assert MaskSpec().mask_ratio == 0.95

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            MaskSpec(mask_ratio=1.0)
        with pytest.raises(ValueError):
            MaskSpec(mask_ratio=-0.1)
        MaskSpec(mask_ratio=0.0)  # keep-everything is allowed

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            MaskSpec(mode="block_sparse")


class TestRandomMask:
    def test_keep_count_formula(self, rng):
        for n, ratio in [(32, 0.95), (32, 0.75), (100, 0.5), (7, 0.99), (1, 0.9)]:
            keep = random_mask(n, ratio, rng)
            assert len(keep) == max(1, round((1.0 - ratio) * n))

    def test_sorted_unique(self, rng):
        keep = random_mask(100, 0.6, rng)
        assert np.all(np.diff(keep) > 0)

    def test_at_least_one_kept_extreme_ratio(self, rng):
        assert len(random_mask(32, 0.999, rng)) == 1

    def test_zero_ratio_keeps_all(self, rng):
        np.testing.assert_array_equal(random_mask(10, 0.0, rng), np.arange(10))

    def test_deterministic_under_seed(self):
        a = random_mask(64, 0.9, np.random.default_rng(7))
        b = random_mask(64, 0.9, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_uniformity_chi_square(self):
        # Each token's keep frequency over many draws should be uniform.
        n, draws = 32, 4000
        rng = np.random.default_rng(11)
        counts = np.zeros(n)
        for _ in range(draws):
            counts[random_mask(n, 0.75, rng)] += 1
        expected = counts.sum() / n
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # dof = 31; reject only at the 1e-4 level to keep flake risk tiny
        assert chi2 < stats.chi2.ppf(1 - 1e-4, df=n - 1)

    def test_empty_grid_rejected(self, rng):
        with pytest.raises(ValueError):
            random_mask(0, 0.5, rng)


class TestMultiblock:
    GRID = (2, 8, 8)

    def test_shape_and_dtype(self, rng):
        m = multiblock_mask(self.GRID, MaskSpec(mode="multiblock"), rng)
        assert m.shape == self.GRID and m.dtype == bool

    def test_time_invariant_tubes(self, rng):
        for _ in range(20):
            m = multiblock_mask(self.GRID, MaskSpec(mode="multiblock"), rng)
            for t in range(1, self.GRID[0]):
                np.testing.assert_array_equal(m[t], m[0])

    def test_nonempty_union(self, rng):
        m = multiblock_mask(self.GRID, MaskSpec(mode="multiblock", num_blocks=8), rng)
        assert m.any()

    def test_block_area_rough_match_single_block(self):
        # One exact-area block: masked fraction ~ area fraction.
        rng = np.random.default_rng(3)
        spec = MaskSpec(mode="multiblock", num_blocks=1, block_area_range=(0.3, 0.3),
                        aspect_ratio_range=(1.0, 1.0))
        fracs = [multiblock_mask((1, 16, 16), spec, rng)[0].mean() for _ in range(50)]
        assert 0.2 < np.mean(fracs) < 0.45

    def test_small_grid_rejected(self, rng):
        with pytest.raises(ValueError):
            multiblock_mask((2, 1, 8), MaskSpec(mode="multiblock"), rng)

    def test_deterministic_under_seed(self):
        spec = MaskSpec(mode="multiblock")
        a = multiblock_mask(self.GRID, spec, np.random.default_rng(5))
        b = multiblock_mask(self.GRID, spec, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestSubsample:
    def test_count_is_ceil(self, rng):
        for n, f, expect in [(32, 0.25, 8), (10, 0.31, 4), (7, 0.5, 4)]:
            assert len(subsample_latent_patches(n, f, rng)) == expect

    def test_full_fraction_identity(self, rng):
        np.testing.assert_array_equal(
            subsample_latent_patches(12, 1.0, rng), np.arange(12)
        )

    def test_sorted_unique(self, rng):
        idx = subsample_latent_patches(50, 0.4, rng)
        assert np.all(np.diff(idx) > 0)

    def test_fraction_bounds(self, rng):
        with pytest.raises(ValueError):
            subsample_latent_patches(10, 0.0, rng)
        with pytest.raises(ValueError):
            subsample_latent_patches(10, 1.5, rng)
