"""Rotary-encoding properties: partition sizes, norm preservation,
relative-shift invariance, linearity, identity at the origin."""

import numpy as np
import pytest

from layerlock import tensor as T
from layerlock.rope import (
    RopeConfig,
    RopeConfigError,
    apply_rope,
    build_rotation_table,
)

GRID = (2, 4, 4)  # default toy grid


def make_table(d_model=32, grid=GRID, fractions=(0.10, 0.25, 0.25)):
    return build_rotation_table(RopeConfig(d_model=d_model, fractions=fractions), grid)


def random_positions(rng, n, grid=GRID):
    return np.stack([rng.integers(0, g, size=n) for g in grid], axis=1).astype(np.intp)


class TestPartition:
    def test_part_sizes_default_64(self):
        # 2*round(f*D/2): D=64 -> (6, 16, 16), 26 dims unrotated.
        cfg = RopeConfig(d_model=64)
        assert cfg.part_sizes() == (6, 16, 16)
        assert 64 - sum(cfg.part_sizes()) == 26

    def test_part_sizes_are_even(self):
        for d in (8, 16, 32, 48, 64, 100):
            assert all(s % 2 == 0 for s in RopeConfig(d_model=d).part_sizes())

    def test_fractions_exceeding_one_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(d_model=32, fractions=(0.5, 0.5, 0.5))

    def test_rounded_parts_exceeding_d_rejected(self):
        # fractions sum to <= 1 but even-rounding pushes parts past d_model
        with pytest.raises(RopeConfigError):
            RopeConfig(d_model=10, fractions=(0.35, 0.35, 0.30))

    def test_unknown_apply_site_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(d_model=32, apply_site="pre_norm")


class TestRotationProperties:
    def test_norm_preservation_100_draws(self, rng):
        table = make_table()
        for _ in range(100):
            pos = random_positions(rng, 5)
            x = rng.normal(size=(5, 32))
            y = apply_rope(T.Tensor(x), table, pos).data
            np.testing.assert_allclose(
                np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-10
            )

    def test_relative_shift_dot_product_100_draws(self, rng):
        # <R(p)x, R(q)y> depends only on p - q: shifting both positions by
        # the same offset leaves the dot product unchanged.
        table = make_table(grid=(4, 8, 8))
        for _ in range(100):
            x = rng.normal(size=(1, 32))
            y = rng.normal(size=(1, 32))
            p = random_positions(rng, 1, (2, 4, 4))
            q = random_positions(rng, 1, (2, 4, 4))
            shift = random_positions(rng, 1, (2, 4, 4))
            rx = apply_rope(T.Tensor(x), table, p).data
            ry = apply_rope(T.Tensor(y), table, q).data
            rxs = apply_rope(T.Tensor(x), table, p + shift).data
            rys = apply_rope(T.Tensor(y), table, q + shift).data
            assert abs((rx @ ry.T).item() - (rxs @ rys.T).item()) < 1e-10

    def test_linearity_100_draws(self, rng):
        table = make_table()
        for _ in range(100):
            pos = random_positions(rng, 3)
            x = rng.normal(size=(3, 32))
            y = rng.normal(size=(3, 32))
            a, b = rng.normal(), rng.normal()
            lhs = apply_rope(T.Tensor(a * x + b * y), table, pos).data
            rhs = a * apply_rope(T.Tensor(x), table, pos).data \
                + b * apply_rope(T.Tensor(y), table, pos).data
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_identity_at_origin_bitwise(self, rng):
        table = make_table()
        x = rng.normal(size=(4, 32))
        pos = np.zeros((4, 3), dtype=np.intp)
        y = apply_rope(T.Tensor(x), table, pos).data
        np.testing.assert_array_equal(y, x)

    def test_unrotated_tail_passthrough(self, rng):
        cfg = RopeConfig(d_model=32)
        r = sum(cfg.part_sizes())
        table = build_rotation_table(cfg, GRID)
        x = rng.normal(size=(6, 32))
        pos = random_positions(rng, 6)
        y = apply_rope(T.Tensor(x), table, pos).data
        np.testing.assert_array_equal(y[:, r:], x[:, r:])

    def test_batched_matches_unbatched(self, rng):
        table = make_table()
        pos = random_positions(rng, 5)
        x = rng.normal(size=(3, 5, 32))
        y = apply_rope(T.Tensor(x), table, pos).data
        for i in range(3):
            yi = apply_rope(T.Tensor(x[i]), table, pos).data
            np.testing.assert_array_equal(y[i], yi)

    def test_zero_rotated_parts_is_identity(self, rng):
        cfg = RopeConfig(d_model=16, fractions=(0.0, 0.0, 0.0))
        table = build_rotation_table(cfg, GRID)
        x = rng.normal(size=(4, 16))
        y = apply_rope(T.Tensor(x), table, random_positions(rng, 4))
        np.testing.assert_array_equal(y.data, x)

    def test_gradient_flows_through_rotation(self, rng):
        from conftest import check_grads

        table = make_table(d_model=8, fractions=(0.25, 0.25, 0.25))
        pos = random_positions(rng, 4)
        arrays = {"x": rng.normal(size=(4, 8))}
        check_grads(
            lambda p: T.tsum(apply_rope(p["x"], table, pos) ** 2.0), arrays
        )


class TestErrors:
    def test_position_out_of_grid(self, rng):
        table = make_table()
        pos = np.array([[0, 0, 4]], dtype=np.intp)  # width grid is 4
        with pytest.raises(IndexError):
            apply_rope(T.Tensor(rng.normal(size=(1, 32))), table, pos)

    def test_negative_position(self, rng):
        table = make_table()
        pos = np.array([[0, -1, 0]], dtype=np.intp)
        with pytest.raises(IndexError):
            apply_rope(T.Tensor(rng.normal(size=(1, 32))), table, pos)

    def test_feature_dim_mismatch(self, rng):
        table = make_table()
        with pytest.raises(T.ShapeMismatchError):
            apply_rope(T.Tensor(rng.normal(size=(1, 16))), table,
                       np.zeros((1, 3), dtype=np.intp))

    def test_position_count_mismatch(self, rng):
        table = make_table()
        with pytest.raises(T.ShapeMismatchError):
            apply_rope(T.Tensor(rng.normal(size=(2, 32))), table,
                       np.zeros((3, 3), dtype=np.intp))

    def test_bad_grid(self):
        with pytest.raises(RopeConfigError):
            build_rotation_table(RopeConfig(d_model=32), (0, 4, 4))
