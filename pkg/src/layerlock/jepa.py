"""V-JEPA-style extension: EMA teacher, teacher layer activations as
targets, a separate decoder transformer, multiblock masking, and the
same progressive freezing applied to the student encoder.

The JEPA path never predicts pixels: before the first freeze event the
target is the teacher's layer-1 output. Loss is computed on masked
tokens only. The separate decoder never freezes.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .engine import (
    FreezeContractError,
    DivergenceError,
    RunConfig,
    TrainState,
    _make_rngs,
    freeze_event,
    freeze_layer_schedule,
)
from .masking import multiblock_mask
from .model import (
    ModelParams,
    TokenBatch,
    _flat_index,
    block_forward,
    embed,
    encode,
    ensure_latent_head,
    init_params,
    patchify,
    predict,
)
from .optim import OptState, adamw_update, cosine_lr, mini_warmup_multiplier


def trunk_names(params: ModelParams):
    """Student parameters mirrored by the teacher (stem + encoder blocks)."""
    cfg = params.config
    keep = []
    for name in params.tensors:
        if name.startswith(("embed.", "pos_embed")):
            keep.append(name)
        elif name.startswith("block"):
            idx = int(name[len("block"):].split(".")[0])
            if idx <= cfg.enc_depth:
                keep.append(name)
    return keep


def make_teacher(params: ModelParams):
    return {n: params.tensors[n].data.copy() for n in trunk_names(params)}


def ema_update(teacher: dict, student: ModelParams, momentum: float) -> dict:
    """theta_T <- m * theta_T + (1 - m) * theta_S, elementwise."""
    out = {}
    for name, arr in teacher.items():
        s = student.tensors[name].data
        if s.shape != arr.shape:
            raise T.ShapeMismatchError(f"teacher/student shape mismatch for {name}")
        out[name] = momentum * arr + (1.0 - momentum) * s
    return out


def teacher_params(teacher: dict, config) -> ModelParams:
    return ModelParams(config, {n: T.Tensor(a) for n, a in teacher.items()})


def jepa_targets(teacher: dict, full_tokens: TokenBatch, config, table, k: int,
                 mask_indices):
    """Teacher h_k rows at masked positions; stop-gradient by construction."""
    if k < 1:
        raise FreezeContractError("JEPA targets start at layer 1, never pixels")
    tp = teacher_params(teacher, config)
    with T.no_grad():
        emb = embed(full_tokens, tp)
        h, _ = encode(emb, tp, table, freeze_layer=0, upto=k)
    return T.stop_gradient(T.take(h, mask_indices, axis=1))


def init_decoder(config: RunConfig, rng: np.random.Generator):
    """Separate decoder transformer + learned mask token."""
    cfg = config.model
    tensors = {}

    def param(name, shape, scale=0.02):
        data = np.zeros(shape) if scale == 0.0 else rng.normal(0.0, scale, size=shape)
        tensors[name] = T.Tensor(data, requires_grad=True)

    param("dec.mask_token", (cfg.d_model,))
    for i in range(1, config.jepa_decoder_depth + 1):
        p = f"dec.block{i}."
        tensors[p + "norm1.g"] = T.Tensor(np.ones(cfg.d_model), requires_grad=True)
        param(p + "norm1.b", (cfg.d_model,), scale=0.0)
        param(p + "qkv.w", (cfg.d_model, 3 * cfg.d_model))
        param(p + "qkv.b", (3 * cfg.d_model,), scale=0.0)
        param(p + "proj.w", (cfg.d_model, cfg.d_model))
        param(p + "proj.b", (cfg.d_model,), scale=0.0)
        tensors[p + "norm2.g"] = T.Tensor(np.ones(cfg.d_model), requires_grad=True)
        param(p + "norm2.b", (cfg.d_model,), scale=0.0)
        param(p + "mlp.w1", (cfg.d_model, cfg.mlp_ratio * cfg.d_model))
        param(p + "mlp.b1", (cfg.mlp_ratio * cfg.d_model,), scale=0.0)
        param(p + "mlp.w2", (cfg.mlp_ratio * cfg.d_model, cfg.d_model))
        param(p + "mlp.b2", (cfg.d_model,), scale=0.0)
    return tensors


class _DecoderView:
    """Adapter letting block_forward index decoder params by plain names."""

    def __init__(self, tensors, config):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name):
        return self.tensors["dec." + name]


class JepaState(TrainState):
    def __init__(self, config: RunConfig):
        rngs = _make_rngs(config.seed)
        params = init_params(config.model, rngs["init"])
        super().__init__(config, params, OptState(), rngs)
        self.decoder = init_decoder(config, rngs.pop("init"))
        self.teacher = make_teacher(params)
        ensure_latent_head(params, 1)  # layer-1 targets from step 0
        self.active_target = 1

    def all_tensors(self):
        return {**self.params.tensors, **self.decoder}


def _decoder_forward(state: JepaState, context, ctx_positions, mask_indices,
                     mask_positions):
    cfg = state.config.model
    b = context.shape[0]
    m = len(mask_indices)
    grid_idx = mask_indices  # row-major grid: flat index == token index
    queries = T.reshape(state.decoder["dec.mask_token"], (1, 1, cfg.d_model))
    if "pos_embed" in state.params.tensors:
        pos = T.take(state.params["pos_embed"], grid_idx, 0)
        queries = queries + T.reshape(pos, (1, m, cfg.d_model))
    else:
        queries = queries + T.Tensor(np.zeros((1, m, cfg.d_model)))
    ones = T.Tensor(np.ones((b, 1, 1)))
    queries = queries * ones  # broadcast to (b, m, d)
    x = T.concat([queries, context], axis=1)
    view = _DecoderView(state.decoder, cfg)
    positions = np.concatenate([mask_positions, ctx_positions], axis=0)
    for i in range(1, state.config.jepa_decoder_depth + 1):
        x = block_forward(x, view, i, cfg, state.table, positions)
    return T.slice_axis(x, 1, 0, m)


def jepa_train_step(state: JepaState, frames: np.ndarray) -> float:
    cfg = state.config
    k_sched = freeze_layer_schedule(state.step, cfg.schedule)
    if k_sched > state.params.frozen_prefix:
        freeze_event(state, k_sched)
    target_layer = max(1, state.active_target)

    tokens_raw, positions = patchify(frames, cfg.model.patch_size)
    masked_grid = multiblock_mask(cfg.model.grid, cfg.mask, state.rngs["mask"])
    flat = masked_grid.ravel()
    mask_indices = np.flatnonzero(flat).astype(np.intp)
    ctx_indices = np.flatnonzero(~flat).astype(np.intp)
    if mask_indices.size == 0 or ctx_indices.size == 0:
        raise ValueError("degenerate multiblock mask (empty context or target)")

    full_batch = TokenBatch(T.Tensor(tokens_raw), positions, "raw_patches")
    ctx_batch = TokenBatch(T.take(full_batch.tokens, ctx_indices, axis=1),
                           positions[ctx_indices], "raw_patches")
    k = state.params.frozen_prefix
    try:
        emb = embed(ctx_batch, state.params, frozen=k >= 1)
        enc, _ = encode(emb, state.params, state.table, freeze_layer=k)
        dec_out = _decoder_forward(state, enc, emb.positions, mask_indices,
                                   positions[mask_indices])
        preds = predict(dec_out, target_layer, state.params)
        targets = jepa_targets(state.teacher, full_batch, cfg.model, state.table,
                               target_layer, mask_indices)
        diff = preds - targets
        loss = T.tmean(diff * diff)
    except T.NonFiniteError as exc:
        raise DivergenceError(f"non-finite loss at step {state.step}") from exc

    grads = T.backward(loss, state.all_tensors())
    frozen = state.params.frozen_names()
    grads = {n: g for n, g in grads.items() if n not in frozen}
    lr = cosine_lr(state.step, cfg.optim) * mini_warmup_multiplier(
        state.step, state.last_switch_step, cfg.optim
    )
    adamw_update(state.all_tensors(), grads, state.opt_state, lr, cfg.optim,
                 step=state.step)
    state.teacher = ema_update(state.teacher, state.params, cfg.ema_momentum)
    state.step += 1
    return float(loss.data)


def teacher_student_distance(state: JepaState) -> float:
    """Sup-norm distance between teacher and student trunk parameters."""
    return max(
        float(np.max(np.abs(arr - state.params.tensors[n].data)))
        for n, arr in state.teacher.items()
    )
