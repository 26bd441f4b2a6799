"""Frozen-feature evaluation: cross-attention readouts with learned
queries, swept over learning rate and feature depth fraction.

Features are extracted once per depth fraction from the frozen backbone
(full grid, no masking, no gradients), so readout training cannot touch
backbone parameters by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import MOTION_CLASSES, batch_frames, synth_video
from .model import TokenBatch, embed, encode, patchify, unpatchify
from .optim import OptimConfig, OptState, adamw_update, cosine_lr

LR_SWEEP = (1e-4, 3e-4, 1e-3)
DEPTH_SWEEP = (0.25, 0.5, 0.75, 0.85, 0.95, 1.0)
ABSREL_EPS = 1e-3
DENSE_VALID_RANGE = (0.001, 10.0)


@dataclass(frozen=True)
class ReadoutConfig:
    depth_fraction: float = 0.95
    n_queries: int = 1
    qkv_size: int = 32
    n_heads: int = 4
    output_size: int = MOTION_CLASSES
    lr_sweep: tuple = LR_SWEEP
    depth_sweep: tuple = DEPTH_SWEEP

    def __post_init__(self):
        if not 0.0 < self.depth_fraction <= 1.0:
            raise ValueError("depth_fraction must be in (0, 1]")


@dataclass(frozen=True)
class ReadoutBudget:
    n_train: int = 256
    n_eval: int = 128
    steps: int = 300
    batch_size: int = 32
    warmup_steps: int = 30
    seed: int = 123


def feature_layer(depth_fraction: float, enc_depth: int) -> int:
    return max(1, round(depth_fraction * enc_depth))


def extract_features(state, clips_frames: np.ndarray, depth_fraction: float):
    """(B, N, D) features from the frozen backbone at the configured layer."""
    cfg = state.config.model
    layer = feature_layer(depth_fraction, cfg.enc_depth)
    tokens_raw, positions = patchify(clips_frames, cfg.patch_size)
    batch = TokenBatch(T.Tensor(tokens_raw), positions, "raw_patches")
    with T.no_grad():
        emb = embed(batch, state.params)
        h, _ = encode(emb, state.params, state.table, freeze_layer=0, upto=layer)
    return h.data


def init_readout(rcfg: ReadoutConfig, d_features: int, rng: np.random.Generator,
                 qk_scale: float = 0.02):
    q = rcfg.qkv_size

    def normal(shape, scale=0.02):
        return T.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    return {
        "queries": normal((rcfg.n_queries, q)),
        "wq": normal((q, q), qk_scale),
        "wk": normal((d_features, q), qk_scale),
        "wv": normal((d_features, q)),
        "out.w": T.Tensor(np.zeros((q, rcfg.output_size)), requires_grad=True),
        "out.b": T.Tensor(np.zeros(rcfg.output_size), requires_grad=True),
    }


def readout_forward(params, features, rcfg: ReadoutConfig):
    """Queries cross-attend to features, then project to the output space.

    features: (B, N, D) array or Tensor; returns (B, n_queries, output).
    """
    feats = T.as_tensor(features)
    b, n, _ = feats.shape
    nh = rcfg.n_heads
    dh = rcfg.qkv_size // nh
    q = params["queries"] @ params["wq"]  # (nq, qkv)
    k = feats @ params["wk"]  # (b, n, qkv)
    v = feats @ params["wv"]

    qh = T.transpose(T.reshape(q, (1, rcfg.n_queries, nh, dh)), (0, 2, 1, 3))
    qh = qh * T.Tensor(np.ones((b, 1, 1, 1)))

    def split(x):
        return T.transpose(T.reshape(x, (b, n, nh, dh)), (0, 2, 1, 3))

    scores = (qh @ T.transpose(split(k), (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax_rows(scores)
    mix = attn @ split(v)  # (b, nh, nq, dh)
    mix = T.reshape(T.transpose(mix, (0, 2, 1, 3)), (b, rcfg.n_queries, rcfg.qkv_size))
    return mix @ params["out.w"] + params["out.b"]


def cross_entropy(logits, labels):
    """logits: (B, C) Tensor, labels: (B,) ints."""
    logp = T.log_softmax_rows(logits)
    picked = T.take(
        T.reshape(logp, (-1,)),
        np.arange(len(labels)) * logits.shape[-1] + np.asarray(labels),
        axis=0,
    )
    return T.neg(T.tmean(picked))


def absrel(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    if not valid.any():
        raise ValueError("no valid target values")
    return float((np.abs(pred - target) / (target + ABSREL_EPS))[valid].mean())


def dense_valid_mask(target: np.ndarray) -> np.ndarray:
    lo, hi = DENSE_VALID_RANGE
    return (target > lo) & (target < hi)


def _make_dataset(state, task: str, budget: ReadoutBudget):
    cfg = state.config.model
    kind = "moving_shapes" if task == "classify" else "gradient_field"
    n = budget.n_train + budget.n_eval
    clips = [synth_video(kind, budget.seed * 100003 + i, cfg.input) for i in range(n)]
    frames = batch_frames(clips)
    if task == "classify":
        targets = np.array([c.label for c in clips])
    else:
        targets = np.stack([c.dense_target for c in clips])
    return frames, targets


def _train_readout(features, targets, task, rcfg, lr, budget, state):
    cfg = state.config.model
    rng = np.random.default_rng(budget.seed + 17)
    params = init_readout(rcfg, cfg.d_model, rng)
    ocfg = OptimConfig(peak_lr=lr, end_lr=1e-7, warmup_steps=budget.warmup_steps,
                       total_steps=budget.steps, weight_decay=0.0,
                       mini_warmup_steps=0)
    opt = OptState()
    n_train = features.shape[0]
    for step in range(budget.steps):
        idx = rng.choice(n_train, size=min(budget.batch_size, n_train), replace=False)
        preds = readout_forward(params, features[idx], rcfg)
        if task == "classify":
            loss = cross_entropy(T.reshape(preds, (len(idx), rcfg.output_size)),
                                 targets[idx])
        else:
            tgt_tokens, _ = _dense_targets_tokens(targets[idx], cfg)
            valid = _valid_weights(targets[idx], cfg)
            diff = (preds - tgt_tokens) * valid
            loss = T.tmean(diff * diff)
        grads = T.backward(loss, params)
        adamw_update(params, grads, opt, cosine_lr(step, ocfg), ocfg)
    return params


def _dense_targets_tokens(dense: np.ndarray, cfg):
    """Per-patch flattened depth targets: (B, N, t*h*w)."""
    tokens, positions = patchify(dense[..., None].repeat(3, axis=-1), cfg.patch_size)
    pt, ph, pw = cfg.patch_size
    per = pt * ph * pw
    return T.Tensor(tokens[..., ::3].copy()), positions


def _valid_weights(dense: np.ndarray, cfg):
    valid = dense_valid_mask(dense).astype(np.float64)
    tokens, _ = patchify(valid[..., None].repeat(3, axis=-1), cfg.patch_size)
    return T.Tensor(tokens[..., ::3].copy())


def _eval_cell(params, features, targets, task, rcfg, state):
    cfg = state.config.model
    with T.no_grad():
        preds = readout_forward(params, features, rcfg)
    if task == "classify":
        pred_labels = preds.data.reshape(len(targets), rcfg.output_size).argmax(axis=1)
        return float((pred_labels == targets).mean())
    per = np.prod(cfg.patch_size)
    pred_dense = unpatchify(
        np.repeat(preds.data, 3, axis=-1).reshape(len(targets), cfg.n_tokens, per * 3),
        cfg.input, cfg.patch_size,
    )[..., 0]
    return absrel(pred_dense, targets, dense_valid_mask(targets))


def task_readout_config(state, task: str) -> ReadoutConfig:
    cfg = state.config.model
    if task == "classify":
        return ReadoutConfig(n_queries=1, qkv_size=cfg.d_model,
                             n_heads=state.config.model.n_heads,
                             output_size=MOTION_CLASSES)
    if task == "dense":
        pt, ph, pw = cfg.patch_size
        return ReadoutConfig(n_queries=cfg.n_tokens, qkv_size=cfg.d_model,
                             n_heads=cfg.n_heads, output_size=pt * ph * pw)
    raise ValueError(f"unknown task {task!r}")


def train_and_eval_readout(state, task: str, budget: ReadoutBudget = None,
                           csv_path: str = None, model_id: str = "model"):
    """Sweep lr x depth fraction, return (best metric, rows).

    Best is the max accuracy (classify) or min AbsRel (dense); ties break
    toward lower lr, then lower depth fraction.
    """
    budget = budget or ReadoutBudget()
    rcfg = task_readout_config(state, task)
    frames, targets = _make_dataset(state, task, budget)
    tr = slice(0, budget.n_train)
    ev = slice(budget.n_train, None)
    rows = []
    for df in rcfg.depth_sweep:
        feats = extract_features(state, frames, df)
        for lr in rcfg.lr_sweep:
            cell_cfg = replace(rcfg, depth_fraction=df)
            params = _train_readout(feats[tr], targets[tr], task, cell_cfg, lr,
                                    budget, state)
            metric = _eval_cell(params, feats[ev], targets[ev], task, cell_cfg, state)
            rows.append({"model_id": model_id, "task": task, "lr": lr,
                         "depth_fraction": df, "metric": metric})
    better = max if task == "classify" else min
    best = better(rows, key=lambda r: r["metric"])
    # Deterministic tie-break: lower lr, then lower depth fraction.
    candidates = [r for r in rows if r["metric"] == best["metric"]]
    best = sorted(candidates, key=lambda r: (r["lr"], r["depth_fraction"]))[0]
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["model_id", "task", "lr",
                                              "depth_fraction", "metric"])
            w.writeheader()
            for r in rows:
                w.writerow(r)
    return best, rows
