"""The LayerLock training engine: freeze schedule, target computation
with stop-gradient, L2 losses, and the end-to-end MAE training step.

Freezing is monotone and fires lazily inside train_step when the
schedule output increases. Targets come from a gradient-free forward of
the full (unmasked) grid truncated at the target layer; pixels are the
layer-0 target. The no-freeze latent-loss variant used by the collapse
experiments lives here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import costmodel
from . import tensor as T
from .data import MetricsWriter, VideoClip, batch_frames, read_checkpoint, synth_video, write_checkpoint
from .masking import MaskSpec, random_mask, subsample_latent_patches
from .model import (
    ModelConfig,
    ModelParams,
    TokenBatch,
    decode,
    decoding_tokens,
    embed,
    encode,
    ensure_latent_head,
    init_params,
    patchify,
    predict,
)
from .optim import OptimConfig, OptState, adamw_update, cosine_lr, mini_warmup_multiplier
from .rope import build_rotation_table


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class FreezeContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class FreezeSchedule:
    start: int = 200
    interval: int = 100
    jump: int = 1
    max_frozen: int = 6
    target_layers: tuple = None  # explicit per-event targets, else prefix

    def frozen_at(self, step: int) -> int:
        if self.max_frozen <= 0 or step < self.start:
            return 0
        return min(self.max_frozen, self.jump * (1 + (step - self.start) // self.interval))

    def target_for(self, prefix: int) -> int:
        """Prediction-target layer for a frozen prefix length."""
        if prefix <= 0:
            return 0
        if self.target_layers is None:
            return prefix
        event_idx = min(len(self.target_layers), math.ceil(prefix / self.jump)) - 1
        return self.target_layers[event_idx]


def freeze_layer_schedule(step: int, sched: FreezeSchedule) -> int:
    if step < 0:
        raise ValueError("step must be >= 0")
    return sched.frozen_at(step)


DISABLED_SCHEDULE = FreezeSchedule(start=0, interval=1, jump=0, max_frozen=0)


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "single"  # "single" | "multi" | "pixels_only"
    loss_patch_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.loss_patch_fraction <= 1.0:
            raise ValueError("loss_patch_fraction must be in (0, 1]")
        if self.kind not in ("single", "multi", "pixels_only"):
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: FreezeSchedule = field(default_factory=FreezeSchedule)
    mask: MaskSpec = field(default_factory=MaskSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    mode: str = "mae"  # mae | mae_baseline | mae_latent_nofreeze | jepa
    steps: int = 2000
    batch_size: int = 2
    seed: int = 0
    data_kind: str = "moving_shapes"
    # mae_latent_nofreeze only:
    latent_weight: float = 1.0
    latent_weight_schedule: str = "const"  # const | cosine
    latent_layers: tuple = ()
    # jepa only:
    ema_momentum: float = 0.998
    jepa_decoder_depth: int = 2
    # instrumentation:
    collapse_every: int = 0  # 0 disables the collapse probe
    collapse_probe_layer: int = 0  # 0 means deepest encoder layer
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("mae", "mae_baseline", "mae_latent_nofreeze", "jepa"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule.max_frozen > self.model.enc_depth:
            raise ValueError("schedule max_frozen exceeds encoder depth")


def _tupleize(cls, d):
    out = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return cls(**out)


def run_config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    parts = {
        "model": ModelConfig,
        "optim": OptimConfig,
        "schedule": FreezeSchedule,
        "mask": MaskSpec,
        "target": TargetSpec,
    }
    kwargs = {}
    for key, cls in parts.items():
        if key in d:
            kwargs[key] = _tupleize(cls, d.pop(key))
    for k, v in d.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return RunConfig(**kwargs)


class TrainState:
    def __init__(self, config: RunConfig, params: ModelParams, opt_state: OptState,
                 rngs, step=0, last_switch_step=0, active_target=0):
        self.config = config
        self.params = params
        self.opt_state = opt_state
        self.rngs = rngs  # {"data": gen, "mask": gen, "subsample": gen}
        self.step = step
        self.last_switch_step = last_switch_step
        self.active_target = active_target  # 0 = pixels
        self.table = build_rotation_table(config.model.rope_config(), config.model.grid)
        self.latents, self.latent_positions = decoding_tokens(config.model, self.table)
        self.event_log = []
        self.metrics = None

    def active_targets(self):
        """Targets contributing to the loss this phase."""
        if self.config.target.kind == "pixels_only" or self.active_target == 0:
            return [0]
        if self.config.target.kind == "multi":
            seen = [0]
            for ev in self.event_log:
                if ev["kind"] == "freeze" and ev["target"] not in seen:
                    seen.append(ev["target"])
            return seen
        return [self.active_target]


def _make_rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    names = ("init", "data", "mask", "subsample", "probe")
    children = ss.spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def init_state(config: RunConfig) -> TrainState:
    rngs = _make_rngs(config.seed)
    params = init_params(config.model, rngs.pop("init"))
    state = TrainState(config, params, OptState(), rngs)
    if config.mode == "mae_latent_nofreeze":
        for layer in config.latent_layers:
            ensure_latent_head(params, layer)
    return state


def freeze_event(state: TrainState, k_new: int):
    """Freeze blocks <= k_new (plus the stem), drop their optimizer
    moments, and open the new prediction head."""
    params = state.params
    if k_new < params.frozen_prefix:
        raise FreezeContractError("freezing is monotone; prefix cannot shrink")
    if k_new > params.config.enc_depth:
        raise FreezeContractError("cannot freeze decoder blocks")
    if k_new == params.frozen_prefix:
        state.event_log.append({"step": state.step, "kind": "noop", "prefix": k_new})
        return
    newly_frozen = params.frozen_names(k_new) - params.frozen_names()
    params.frozen_prefix = k_new
    state.opt_state.drop(newly_frozen)
    if state.config.target.kind == "pixels_only":
        target = 0
    else:
        target = state.config.schedule.target_for(k_new)
        ensure_latent_head(params, target)
    state.active_target = target
    state.last_switch_step = state.step
    state.event_log.append(
        {"step": state.step, "kind": "freeze", "prefix": k_new, "target": target,
         "frozen_param_count": int(sum(params.tensors[n].size for n in newly_frozen))}
    )


def compute_targets(full_tokens: TokenBatch, params: ModelParams, table, k: int):
    """Stop-gradient targets: raw pixels for k=0, else h_k from a
    gradient-free forward of the full grid truncated at layer k."""
    if k == 0:
        return T.stop_gradient(full_tokens.tokens)
    if k > params.frozen_prefix:
        raise FreezeContractError("latent targets must come from the frozen prefix")
    with T.no_grad():
        emb = embed(full_tokens, params)
        h, _ = encode(emb, params, table, freeze_layer=0, upto=k)
    return T.stop_gradient(h)


def layerlock_loss(preds, targets, indices=None):
    """Mean squared error over selected tokens and all channels."""
    if indices is not None:
        indices = np.asarray(indices, dtype=np.intp)
        if indices.size == 0:
            raise ValueError("empty subsample index set")
        preds = T.take(preds, indices, axis=1)
        targets = T.take(targets, indices, axis=1)
    if preds.shape != targets.shape:
        raise T.ShapeMismatchError(f"loss shapes differ: {preds.shape} vs {targets.shape}")
    diff = preds - targets
    return T.tmean(diff * diff)


def _forward_context(state: TrainState, tokens_raw, positions, keep):
    """Masked context pass + decoder; returns out_tokens (B, N, D)."""
    params = state.params
    ctx_tokens = T.take(T.as_tensor(tokens_raw), keep, axis=1)
    ctx_batch = TokenBatch(ctx_tokens, positions[keep], "raw_patches")
    k = params.frozen_prefix
    emb = embed(ctx_batch, params, frozen=k >= 1)
    enc, _ = encode(emb, params, state.table, freeze_layer=k)
    return decode(enc, emb.positions, state.latents, state.latent_positions,
                  params, state.table)


def _loss_for_target(state, out_tokens, full_batch, layer, subsample_idx):
    params = state.params
    preds = predict(out_tokens, layer, params)
    targets = compute_targets(full_batch, params, state.table, layer)
    idx = subsample_idx if layer > 0 else None
    return layerlock_loss(preds, targets, idx)


def draw_batch(state: TrainState):
    seeds = state.rngs["data"].integers(0, 2**31, size=state.config.batch_size)
    clips = [synth_video(state.config.data_kind, int(s), state.config.model.input)
             for s in seeds]
    return batch_frames(clips)


def train_step(state: TrainState, frames: np.ndarray) -> float:
    """One LayerLock MAE step; returns the scalar loss."""
    cfg = state.config
    sched = DISABLED_SCHEDULE if cfg.mode == "mae_baseline" else cfg.schedule
    k_sched = freeze_layer_schedule(state.step, sched)
    if k_sched > state.params.frozen_prefix:
        freeze_event(state, k_sched)

    tokens_raw, positions = patchify(frames, cfg.model.patch_size)
    keep = random_mask(cfg.model.n_tokens, cfg.mask.mask_ratio, state.rngs["mask"])
    subsample_idx = None
    if cfg.target.loss_patch_fraction < 1.0:
        subsample_idx = subsample_latent_patches(
            cfg.model.n_tokens, cfg.target.loss_patch_fraction, state.rngs["subsample"]
        )
    full_batch = TokenBatch(T.Tensor(tokens_raw), positions, "raw_patches")

    try:
        out_tokens = _forward_context(state, tokens_raw, positions, keep)
        losses = [
            _loss_for_target(state, out_tokens, full_batch, layer, subsample_idx)
            for layer in state.active_targets()
        ]
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
    except T.NonFiniteError as exc:
        raise DivergenceError(f"non-finite loss at step {state.step}") from exc

    _apply_update(state, loss)
    return float(loss.data)


def mae_latent_nofreeze_step(state: TrainState, frames: np.ndarray) -> float:
    """Pixel loss plus weighted latent losses with no freezing; the
    collapse-ablation arm. Targets still receive stop-gradient but come
    from the live (unfrozen) trunk."""
    cfg = state.config
    tokens_raw, positions = patchify(frames, cfg.model.patch_size)
    keep = random_mask(cfg.model.n_tokens, cfg.mask.mask_ratio, state.rngs["mask"])
    full_batch = TokenBatch(T.Tensor(tokens_raw), positions, "raw_patches")

    w = latent_loss_weight(state.step, cfg)
    try:
        out_tokens = _forward_context(state, tokens_raw, positions, keep)
        loss = layerlock_loss(predict(out_tokens, 0, state.params),
                             T.stop_gradient(full_batch.tokens))
        if w != 0.0:
            with T.no_grad():
                emb = embed(full_batch, state.params)
                _, layer_outs = encode(emb, state.params, state.table,
                                       freeze_layer=0, record_layers=True,
                                       upto=max(cfg.latent_layers, default=0))
            for layer in cfg.latent_layers:
                preds = predict(out_tokens, layer, state.params)
                loss = loss + w * layerlock_loss(preds, T.stop_gradient(layer_outs[layer - 1]))
    except T.NonFiniteError as exc:
        raise DivergenceError(f"non-finite loss at step {state.step}") from exc

    _apply_update(state, loss)
    return float(loss.data)


def latent_loss_weight(step: int, cfg: RunConfig) -> float:
    if cfg.latent_weight_schedule == "const":
        return cfg.latent_weight
    if cfg.latent_weight_schedule == "cosine":
        progress = step / max(1, cfg.steps)
        return cfg.latent_weight * 0.5 * (1.0 - math.cos(2.0 * math.pi * progress))
    raise ValueError(f"unknown latent weight schedule {cfg.latent_weight_schedule!r}")


def _apply_update(state: TrainState, loss):
    cfg = state.config
    grads = T.backward(loss, state.params.tensors)
    frozen = state.params.frozen_names()
    grads = {n: g for n, g in grads.items() if n not in frozen}
    lr = cosine_lr(state.step, cfg.optim) * mini_warmup_multiplier(
        state.step, state.last_switch_step, cfg.optim
    )
    adamw_update(state.params.tensors, grads, state.opt_state, lr, cfg.optim,
                 step=state.step)
    state.step += 1
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss at step {state.step - 1}")


def step_metrics(state: TrainState, loss: float) -> dict:
    cfg = state.config
    step = state.step - 1  # metrics describe the step just taken
    k = state.params.frozen_prefix
    target = state.active_targets()[-1]
    lr = cosine_lr(step, cfg.optim) * mini_warmup_multiplier(
        step, state.last_switch_step, cfg.optim
    )
    record = {
        "step": step,
        "loss": loss,
        "lr": lr,
        "frozen_prefix": k,
        "target": "pixels" if target == 0 else f"layer{target}",
        "flops_step": costmodel.step_flops(
            cfg.model, cfg.mask.mask_ratio, k, target, cfg.batch_size
        ),
    }
    if hasattr(state, "teacher"):
        from .jepa import teacher_student_distance

        record["teacher_student_dist"] = teacher_student_distance(state)
    return record


# -- checkpointing ------------------------------------------------------


def _rng_states(rngs):
    return {name: gen.bit_generator.state for name, gen in rngs.items()}


def _restore_rngs(states):
    out = {}
    for name, st in states.items():
        gen = np.random.default_rng(0)
        gen.bit_generator.state = st
        out[name] = gen
    return out


def save_checkpoint(state: TrainState, path: str):
    arrays = {}
    for name, t in state.params.tensors.items():
        arrays["param." + name] = t.data
    for name, m in state.opt_state.m.items():
        arrays["opt.m." + name] = m
    for name, v in state.opt_state.v.items():
        arrays["opt.v." + name] = v
    meta = {
        "format_version": 1,
        "config": run_config_to_dict(state.config),
        "step": state.step,
        "last_switch_step": state.last_switch_step,
        "active_target": state.active_target,
        "frozen_prefix": state.params.frozen_prefix,
        "event_log": state.event_log,
        "opt_t": state.opt_state.t,
        "rng": _rng_states(state.rngs),
    }
    write_checkpoint(path, meta, arrays)


def load_checkpoint(path: str) -> TrainState:
    meta, arrays = read_checkpoint(path)
    config = run_config_from_dict(meta["config"])
    state = init_state(config)
    for name, t in state.params.tensors.items():
        key = "param." + name
        if key in arrays:
            t.data = arrays[key]
    # Heads created after init.
    for key, arr in arrays.items():
        if key.startswith("param.") and key[len("param."):] not in state.params.tensors:
            name = key[len("param."):]
            state.params.tensors[name] = T.Tensor(arr, requires_grad=True)
    state.params.frozen_prefix = meta["frozen_prefix"]
    state.step = meta["step"]
    state.last_switch_step = meta["last_switch_step"]
    state.active_target = meta["active_target"]
    state.event_log = meta["event_log"]
    state.opt_state.t = {k: int(v) for k, v in meta["opt_t"].items()}
    state.opt_state.m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    state.opt_state.v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    state.rngs = _restore_rngs(meta["rng"])
    return state


# -- run loop -----------------------------------------------------------


def run_training(config: RunConfig, metrics_path=None, checkpoint_dir=None,
                 state: TrainState = None, probe_hook=None):
    """Train for config.steps total steps (resuming from `state` if given).

    Returns (state, loss_trace) where loss_trace covers the steps taken
    in this call.
    """
    from .jepa import JepaState, jepa_train_step  # deferred: jepa imports engine

    if state is None:
        if config.mode == "jepa":
            state = JepaState(config)
        else:
            state = init_state(config)
    writer = MetricsWriter(metrics_path)
    losses = []
    try:
        while state.step < config.steps:
            frames = draw_batch(state)
            if config.mode == "jepa":
                loss = jepa_train_step(state, frames)
            elif config.mode == "mae_latent_nofreeze":
                loss = mae_latent_nofreeze_step(state, frames)
            else:
                loss = train_step(state, frames)
            losses.append(loss)
            record = step_metrics(state, loss)
            if config.collapse_every and (state.step - 1) % config.collapse_every == 0:
                record.update(probe_collapse(state))
            if probe_hook is not None:
                probe_hook(state, record)
            writer.append(record)
            if checkpoint_dir and config.checkpoint_every and \
                    state.step % config.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_dir)
        if checkpoint_dir:
            save_checkpoint(state, checkpoint_dir)
    finally:
        writer.close()
    return state, np.array(losses)


def probe_features(state: TrainState, layer: int = 0, n_clips: int = 8,
                   probe_seed: int = 977):
    """Full-grid features from a fixed probe batch at the given encoder
    layer (0 means the deepest encoder layer); gradient-free."""
    cfg = state.config
    layer = layer or cfg.model.enc_depth
    clips = [synth_video(cfg.data_kind, probe_seed + i, cfg.model.input)
             for i in range(n_clips)]
    tokens_raw, positions = patchify(batch_frames(clips), cfg.model.patch_size)
    batch = TokenBatch(T.Tensor(tokens_raw), positions, "raw_patches")
    with T.no_grad():
        emb = embed(batch, state.params)
        h, _ = encode(emb, state.params, state.table, freeze_layer=0, upto=layer)
    return h.data


def probe_collapse(state: TrainState) -> dict:
    from .analysis import collapse_metrics

    feats = probe_features(state, state.config.collapse_probe_layer)
    m = collapse_metrics(feats)
    return {f"collapse_{k}": v for k, v in m.items()}
