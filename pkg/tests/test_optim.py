"""Optimizer: closed-form AdamW oracle, schedule shapes, decay
exemptions, lazy moment lifecycle."""

import math

import numpy as np
import pytest

from layerlock import tensor as T
from layerlock.optim import (
    OptimConfig,
    OptState,
    adamw_update,
    cosine_lr,
    decay_exempt,
    mini_warmup_multiplier,
    weight_decay_at,
)

CFG = OptimConfig(peak_lr=1e-3, end_lr=1e-5, warmup_steps=10, total_steps=100,
                  weight_decay=0.05, mini_warmup_steps=5)


def reference_adamw(x0, grads_seq, cfg, lr, decayed=True):
    """Independent scalar AdamW recurrence."""
    x, m, v = float(x0), 0.0, 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = cfg.b1 * m + (1 - cfg.b1) * g
        v = cfg.b2 * v + (1 - cfg.b2) * g * g
        m_hat = m / (1 - cfg.b1**t)
        v_hat = v / (1 - cfg.b2**t)
        upd = m_hat / (math.sqrt(v_hat) + cfg.eps)
        if decayed:
            upd += cfg.weight_decay * x
        x -= lr * upd
    return x


class TestAdamW:
    def test_matches_scalar_recurrence(self):
        rng = np.random.default_rng(1)
        gs = rng.normal(size=8)
        p = {"w": T.Tensor(np.array(0.7), requires_grad=True)}
        opt = OptState()
        for g in gs:
            adamw_update(p, {"w": np.array(g)}, opt, 1e-3, CFG)
        expected = reference_adamw(0.7, gs, CFG, 1e-3)
        np.testing.assert_allclose(float(p["w"].data), expected, rtol=1e-12)

    def test_decay_exempt_names_skip_decay(self):
        rng = np.random.default_rng(2)
        gs = rng.normal(size=5)
        p = {"block1.norm1.g": T.Tensor(np.array(0.9), requires_grad=True)}
        opt = OptState()
        for g in gs:
            adamw_update(p, {"block1.norm1.g": np.array(g)}, opt, 1e-3, CFG)
        expected = reference_adamw(0.9, gs, CFG, 1e-3, decayed=False)
        np.testing.assert_allclose(float(p["block1.norm1.g"].data), expected,
                                   rtol=1e-12)

    def test_decay_exemption_rules(self):
        assert decay_exempt("block3.norm2.g")
        assert decay_exempt("block3.qkv.b")
        assert decay_exempt("block3.mlp.b1")
        assert decay_exempt("pos_embed")
        assert not decay_exempt("block3.qkv.w")
        assert not decay_exempt("embed.w")
        assert not decay_exempt("pixel_head.w")

    def test_lazy_moment_creation(self):
        p = {"a": T.Tensor(np.zeros(3), requires_grad=True),
             "b": T.Tensor(np.zeros(2), requires_grad=True)}
        opt = OptState()
        adamw_update(p, {"a": np.ones(3)}, opt, 1e-3, CFG)
        assert set(opt.m) == {"a"}
        assert opt.n_moment_values() == 3

    def test_drop_removes_moments(self):
        p = {"a": T.Tensor(np.zeros(3), requires_grad=True)}
        opt = OptState()
        adamw_update(p, {"a": np.ones(3)}, opt, 1e-3, CFG)
        opt.drop(["a", "missing"])
        assert opt.n_entries() == 0 and opt.t == {}

    def test_update_touches_only_grad_keys(self):
        p = {"a": T.Tensor(np.ones(2), requires_grad=True),
             "b": T.Tensor(np.ones(2), requires_grad=True)}
        before = p["b"].data.copy()
        adamw_update(p, {"a": np.ones(2)}, OptState(), 1e-3, CFG)
        np.testing.assert_array_equal(p["b"].data, before)

    def test_shape_mismatch_rejected(self):
        p = {"a": T.Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(T.ShapeMismatchError):
            adamw_update(p, {"a": np.ones(3)}, OptState(), 1e-3, CFG)

    def test_state_dict_round_trip(self):
        p = {"a": T.Tensor(np.ones(2), requires_grad=True)}
        opt = OptState()
        adamw_update(p, {"a": np.ones(2)}, opt, 1e-3, CFG)
        sd = opt.state_dict()
        opt2 = OptState()
        opt2.load_state_dict(sd)
        np.testing.assert_array_equal(opt2.m["a"], opt.m["a"])
        assert opt2.t == opt.t


class TestSchedules:
    def test_warmup_is_linear(self):
        assert cosine_lr(0, CFG) == 0.0
        np.testing.assert_allclose(cosine_lr(5, CFG), CFG.peak_lr * 0.5)

    def test_peak_at_warmup_end(self):
        np.testing.assert_allclose(cosine_lr(CFG.warmup_steps, CFG), CFG.peak_lr)

    def test_end_lr_at_total(self):
        np.testing.assert_allclose(cosine_lr(CFG.total_steps, CFG), CFG.end_lr)
        np.testing.assert_allclose(cosine_lr(CFG.total_steps + 50, CFG), CFG.end_lr)

    def test_monotone_decay_after_warmup(self):
        lrs = [cosine_lr(s, CFG) for s in range(CFG.warmup_steps, CFG.total_steps)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_halfway_midpoint(self):
        mid = (CFG.warmup_steps + CFG.total_steps) // 2
        np.testing.assert_allclose(cosine_lr(mid, CFG),
                                   (CFG.peak_lr + CFG.end_lr) / 2, rtol=0.05)

    def test_mini_warmup_ramp(self):
        assert mini_warmup_multiplier(100, 100, CFG) == pytest.approx(1 / 5)
        assert mini_warmup_multiplier(103, 100, CFG) == pytest.approx(4 / 5)
        assert mini_warmup_multiplier(104, 100, CFG) == 1.0
        assert mini_warmup_multiplier(500, 100, CFG) == 1.0

    def test_mini_warmup_disabled(self):
        cfg = OptimConfig(warmup_steps=1, total_steps=10, mini_warmup_steps=0)
        assert mini_warmup_multiplier(0, 0, cfg) == 1.0

    def test_mini_warmup_step_before_switch_rejected(self):
        with pytest.raises(ValueError):
            mini_warmup_multiplier(99, 100, CFG)

    def test_weight_decay_constant_without_ramp(self):
        assert weight_decay_at(0, CFG) == CFG.weight_decay
        assert weight_decay_at(99, CFG) == CFG.weight_decay

    def test_weight_decay_linear_ramp(self):
        cfg = OptimConfig(warmup_steps=1, total_steps=101, weight_decay=0.04,
                          weight_decay_end=0.4)
        assert weight_decay_at(0, cfg) == pytest.approx(0.04)
        assert weight_decay_at(100, cfg) == pytest.approx(0.4)
        assert weight_decay_at(50, cfg) == pytest.approx(0.22)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(warmup_steps=10, total_steps=10)
        with pytest.raises(ValueError):
            OptimConfig(b1=1.0, warmup_steps=1, total_steps=10)
