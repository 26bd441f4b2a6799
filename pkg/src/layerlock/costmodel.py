"""Analytic per-step FLOPs and peak-memory accounting.

Counts are matmul-dominant: each multiply-add is 2 FLOPs; norms,
activations and biases are ignored as sub-1% terms. Backward cost is
fixed at 2x forward and is only paid for unfrozen layers.

Per step the model charges:
  - context pass: patch embedding + encoder blocks on K kept tokens
    (forward everywhere, backward only above the frozen prefix),
  - decoder pass: decoder blocks on N + K tokens, forward + backward,
  - prediction head on N tokens, forward + backward,
  - target pass: forward-only full-grid pass. "truncated" charges layers
    1..k as the engine actually runs it (nothing during the pixel
    phase); "full" charges the whole encoder every step, matching a
    literal full-depth target forward.

Peak memory = parameter bytes + Adam moment bytes (2x trainable
parameters) + activation bytes retained for backward, where each
unfrozen block retains n*D*(7 + mlp_ratio) + n_heads*n^2 floats per
batch element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig

BYTES = 8  # float64


def linear_flops(n, d_in, d_out):
    return 2.0 * n * d_in * d_out


def block_forward_flops(n, cfg: ModelConfig):
    d = cfg.d_model
    attn = linear_flops(n, d, 3 * d) + linear_flops(n, d, d) + 2 * (2.0 * n * n * d)
    mlp = 2 * linear_flops(n, d, cfg.mlp_ratio * d)
    return attn + mlp


def block_retained_floats(n, cfg: ModelConfig):
    return n * cfg.d_model * (7 + cfg.mlp_ratio) + cfg.n_heads * n * n


def kept_tokens(cfg: ModelConfig, mask_ratio: float):
    return max(1, round((1.0 - mask_ratio) * cfg.n_tokens))


def head_out_dim(cfg: ModelConfig, target_layer: int):
    return cfg.patch_dim if target_layer == 0 else cfg.d_model


def step_flops(cfg: ModelConfig, mask_ratio: float, k: int, target_layer: int,
               batch_size: int = 1, target_pass: str = "truncated"):
    """Training FLOPs for one step with frozen prefix k."""
    n = cfg.n_tokens
    kk = kept_tokens(cfg, mask_ratio)
    fl = 0.0
    # Context pass.
    embed_mult = 1.0 if k >= 1 else 3.0  # stem freezes with block 1
    fl += embed_mult * linear_flops(kk, cfg.patch_dim, cfg.d_model)
    for i in range(1, cfg.enc_depth + 1):
        fl += (1.0 if i <= k else 3.0) * block_forward_flops(kk, cfg)
    # Decoder pass on latents + context.
    fl += cfg.decoder_blocks * 3.0 * block_forward_flops(n + kk, cfg)
    # Prediction head.
    fl += 3.0 * linear_flops(n, cfg.d_model, head_out_dim(cfg, target_layer))
    # Target pass (forward only).
    if target_pass == "full":
        depth = cfg.enc_depth
    elif target_pass == "truncated":
        depth = target_layer
    else:
        raise ValueError(f"unknown target_pass mode {target_pass!r}")
    if depth > 0:
        fl += linear_flops(n, cfg.patch_dim, cfg.d_model)
        fl += depth * block_forward_flops(n, cfg)
    return batch_size * fl


def _block_param_count(cfg: ModelConfig):
    d = cfg.d_model
    return (d * 3 * d + 3 * d) + (d * d + d) + 4 * d + 2 * (d * cfg.mlp_ratio * d) \
        + cfg.mlp_ratio * d + d


def param_counts(cfg: ModelConfig, heads):
    """(total, per-name-group) parameter counts; `heads` lists created
    latent-head layers (pixel head always exists)."""
    d = cfg.d_model
    embed = cfg.patch_dim * d + d
    if cfg.positional == "learned":
        embed += cfg.n_tokens * d
    blocks = cfg.depth * _block_param_count(cfg)
    heads_n = (d * cfg.patch_dim + cfg.patch_dim) + len(heads) * (d * d + d)
    return embed + blocks + heads_n


def trainable_param_count(cfg: ModelConfig, k: int, target_layer: int):
    """Parameters receiving updates with frozen prefix k (active head only)."""
    d = cfg.d_model
    count = (cfg.depth - k) * _block_param_count(cfg)
    if k == 0:
        count += cfg.patch_dim * d + d
        if cfg.positional == "learned":
            count += cfg.n_tokens * d
    if target_layer == 0:
        count += d * cfg.patch_dim + cfg.patch_dim
    else:
        count += d * d + d
    return count


def step_peak_memory(cfg: ModelConfig, mask_ratio: float, k: int, target_layer: int,
                     batch_size: int = 1, heads=()):
    n = cfg.n_tokens
    kk = kept_tokens(cfg, mask_ratio)
    params = param_counts(cfg, heads)
    moments = 2 * trainable_param_count(cfg, k, target_layer)
    retained = 0.0
    if k == 0:
        retained += kk * cfg.d_model  # stem output
    retained += (cfg.enc_depth - k) * block_retained_floats(kk, cfg)
    retained += cfg.decoder_blocks * block_retained_floats(n + kk, cfg)
    return BYTES * (params + moments + batch_size * retained)


@dataclass
class CostReport:
    steps: int
    flops_step: np.ndarray
    flops_cum: np.ndarray
    peak_memory: np.ndarray
    baseline_flops_step: np.ndarray
    baseline_flops_cum: np.ndarray
    baseline_peak_memory: np.ndarray
    event_steps: list = field(default_factory=list)

    def cumulative_savings_fraction(self):
        total = self.baseline_flops_cum[-1]
        return (total - self.flops_cum[-1]) / total


def flops_estimate(cfg: ModelConfig, schedule, mask_ratio: float, steps: int,
                   batch_size: int = 1, target_pass: str = "truncated") -> CostReport:
    """Cost series for a freeze schedule vs. the never-freezing baseline.

    `schedule` is a FreezeSchedule (duck-typed: frozen_at / target_for).
    """
    flops = np.empty(steps)
    mem = np.empty(steps)
    base_flops = np.empty(steps)
    base_mem = np.empty(steps)
    events = []
    prev_k = 0
    heads = []
    for s in range(steps):
        k = schedule.frozen_at(s)
        tgt = 0 if k == 0 else schedule.target_for(k)
        if k > prev_k:
            events.append(s)
            if tgt > 0 and tgt not in heads:
                heads.append(tgt)
            prev_k = k
        flops[s] = step_flops(cfg, mask_ratio, k, tgt, batch_size, target_pass)
        mem[s] = step_peak_memory(cfg, mask_ratio, k, tgt, batch_size, tuple(heads))
        base_flops[s] = step_flops(cfg, mask_ratio, 0, 0, batch_size, target_pass)
        base_mem[s] = step_peak_memory(cfg, mask_ratio, 0, 0, batch_size, ())
    return CostReport(
        steps=steps,
        flops_step=flops,
        flops_cum=np.cumsum(flops),
        peak_memory=mem,
        baseline_flops_step=base_flops,
        baseline_flops_cum=np.cumsum(base_flops),
        baseline_peak_memory=base_mem,
        event_steps=events,
    )
