"""AdamW with decoupled weight decay, cosine LR schedule with linear
warmup, and the per-target-switch mini-warmup multiplier.

The mini-warmup multiplies the global cosine envelope rather than
resetting it, so a single decay envelope spans the whole run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 3e-4
    end_lr: float = 0.0
    warmup_steps: int = 100
    total_steps: int = 2000
    b1: float = 0.90
    b2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    mini_warmup_steps: int = 1000
    # JEPA preset only: linear-in-step weight decay ramp (wd -> wd_end).
    weight_decay_end: float = None

    def __post_init__(self):
        if not (0.0 < self.b1 < 1.0 and 0.0 < self.b2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")


def decay_exempt(name: str) -> bool:
    """Norm gains and all biases are exempt from weight decay."""
    return "norm" in name or name.endswith((".b", ".b1", ".b2")) or name == "pos_embed"


def cosine_lr(step: int, cfg: OptimConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.end_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def mini_warmup_multiplier(step: int, last_switch_step: int, cfg: OptimConfig) -> float:
    if cfg.mini_warmup_steps <= 0:
        return 1.0
    if step < last_switch_step:
        raise ValueError("step precedes last switch")
    return min(1.0, (step - last_switch_step + 1) / cfg.mini_warmup_steps)


def weight_decay_at(step: int, cfg: OptimConfig) -> float:
    if cfg.weight_decay_end is None:
        return cfg.weight_decay
    frac = min(1.0, step / max(1, cfg.total_steps - 1))
    return cfg.weight_decay + (cfg.weight_decay_end - cfg.weight_decay) * frac


class OptState:
    """First/second moments plus a per-key step counter for bias correction.

    Entries are created lazily on the first gradient for a key and dropped
    when the key freezes; moments therefore cover exactly the parameters
    that have been updated and are still trainable.
    """

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = {}

    def n_entries(self):
        return len(self.m)

    def n_moment_values(self):
        return sum(a.size for a in self.m.values())

    def drop(self, names):
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)

    def state_dict(self):
        return {
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": dict(self.t),
        }

    def load_state_dict(self, d):
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in d["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in d["v"].items()}
        self.t = {k: int(v) for k, v in d["t"].items()}


def adamw_update(params, grads, opt_state: OptState, lr_effective: float,
                 cfg: OptimConfig, step: int = None):
    """In-place AdamW step over exactly the keys present in `grads`.

    params: name -> Tensor. Decoupled decay is skipped for exempt names.
    """
    wd = cfg.weight_decay if step is None else weight_decay_at(step, cfg)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise T.ShapeMismatchError(f"grad shape mismatch for {name}")
        if name not in opt_state.m:
            opt_state.m[name] = np.zeros_like(p.data)
            opt_state.v[name] = np.zeros_like(p.data)
            opt_state.t[name] = 0
        opt_state.t[name] += 1
        t = opt_state.t[name]
        m = opt_state.m[name] = cfg.b1 * opt_state.m[name] + (1.0 - cfg.b1) * g
        v = opt_state.v[name] = cfg.b2 * opt_state.v[name] + (1.0 - cfg.b2) * (g * g)
        m_hat = m / (1.0 - cfg.b1**t)
        v_hat = v / (1.0 - cfg.b2**t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if wd and not decay_exempt(name):
            update = update + wd * p.data
        p.data = p.data - lr_effective * update
