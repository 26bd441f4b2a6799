"""ViT backbone with in-backbone decoding latents and patch-wise heads.

The backbone is a single stack of pre-norm blocks. The first
`depth - decoder_blocks` blocks form the encoder; the trailing blocks act
as the decoder once the grid of decoding latents is concatenated in front
of the context tokens. Prediction heads are patch-wise linear maps,
zero-initialized, created lazily per target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .rope import RopeConfig, RotationTable, apply_rope, build_rotation_table


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 10
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    patch_size: tuple = (2, 16, 16)
    decoder_blocks: int = 4
    input: tuple = (16, 224, 224)
    rope_fractions: tuple = (0.10, 0.25, 0.25)
    rope_max_wavelength: float = 10000.0
    rope_apply_site: str = "post_first_norm"
    positional: str = "rope"  # "rope" or "learned" (learned also keeps rope off)
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.decoder_blocks >= self.depth:
            raise ConfigError("decoder_blocks must be < depth")
        for dim, p in zip(self.input, self.patch_size):
            if dim % p != 0:
                raise ConfigError(f"input {self.input} not divisible by patch {self.patch_size}")
        if self.positional not in ("rope", "learned"):
            raise ConfigError(f"unknown positional mode {self.positional!r}")

    @property
    def enc_depth(self):
        return self.depth - self.decoder_blocks

    @property
    def grid(self):
        return tuple(d // p for d, p in zip(self.input, self.patch_size))

    @property
    def n_tokens(self):
        t, h, w = self.grid
        return t * h * w

    @property
    def patch_dim(self):
        t, h, w = self.patch_size
        return t * h * w * 3

    def rope_config(self):
        return RopeConfig(
            d_model=self.d_model,
            fractions=self.rope_fractions,
            max_wavelength=self.rope_max_wavelength,
            apply_site=self.rope_apply_site,
        )


@dataclass
class TokenBatch:
    tokens: T.Tensor  # (B, N, D) embedded or (B, N, patch_dim) raw
    positions: np.ndarray  # (N, 3) grid coords shared across the batch
    kind: str  # "raw_patches" | "embedded"


def grid_positions(grid):
    """Row-major (tau, i, j) coordinates for the full patch grid."""
    t, h, w = grid
    tt, ii, jj = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([tt.ravel(), ii.ravel(), jj.ravel()], axis=1).astype(np.intp)


def patchify(video: np.ndarray, patch_size):
    """Split (B, T, H, W, 3) pixels into row-major flat patch tokens.

    Returns (tokens (B, N, t*h*w*3), positions (N, 3)). Exact inverse is
    unpatchify.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        video = video[None]
    b, tt, hh, ww, c = video.shape
    pt, ph, pw = patch_size
    if tt % pt or hh % ph or ww % pw:
        raise ConfigError(f"video {video.shape[1:]} not divisible by patch {patch_size}")
    gt, gh, gw = tt // pt, hh // ph, ww // pw
    x = video.reshape(b, gt, pt, gh, ph, gw, pw, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    tokens = x.reshape(b, gt * gh * gw, pt * ph * pw * c)
    return tokens, grid_positions((gt, gh, gw))


def unpatchify(tokens: np.ndarray, input_shape, patch_size):
    """Inverse of patchify; bitwise exact."""
    tokens = np.asarray(tokens)
    tt, hh, ww = input_shape
    pt, ph, pw = patch_size
    gt, gh, gw = tt // pt, hh // ph, ww // pw
    b = tokens.shape[0]
    x = tokens.reshape(b, gt, gh, gw, pt, ph, pw, 3)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, tt, hh, ww, 3)


class ModelParams:
    """Named parameter store with a frozen-prefix marker."""

    def __init__(self, config: ModelConfig, tensors, frozen_prefix=0):
        self.config = config
        self.tensors = tensors  # ordered dict name -> Tensor
        self.frozen_prefix = frozen_prefix

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def frozen_names(self, prefix=None):
        """Parameter names in the frozen set for a given prefix length.

        The patch-embedding stem (and learned positional table) freezes
        together with block 1.
        """
        k = self.frozen_prefix if prefix is None else prefix
        out = set()
        if k >= 1:
            out.update(n for n in self.tensors if n.startswith(("embed.", "pos_embed")))
            for i in range(1, k + 1):
                out.update(n for n in self.tensors if n.startswith(f"block{i}."))
        return out

    def trainable(self):
        frozen = self.frozen_names()
        return {n: t for n, t in self.tensors.items() if n not in frozen}

    def head_names(self):
        return [n for n in self.tensors if n.startswith(("pixel_head.", "latent_head"))]

    def snapshot(self):
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def n_params(self, names=None):
        names = self.tensors if names is None else names
        return sum(self.tensors[n].size for n in names)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    tensors = {}

    def param(name, shape, scale=0.02):
        if scale == 0.0:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, scale, size=shape)
        tensors[name] = T.Tensor(data, requires_grad=True)

    param("embed.w", (cfg.patch_dim, cfg.d_model))
    param("embed.b", (cfg.d_model,), scale=0.0)
    if cfg.positional == "learned":
        param("pos_embed", (cfg.n_tokens, cfg.d_model))
    for i in range(1, cfg.depth + 1):
        p = f"block{i}."
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
    # Heads start at zero so predictions open at the target mean scale.
    param("pixel_head.w", (cfg.d_model, cfg.patch_dim), scale=0.0)
    param("pixel_head.b", (cfg.patch_dim,), scale=0.0)
    return ModelParams(cfg, tensors)


def ensure_latent_head(params: ModelParams, layer: int):
    """Create the zero-init patch-wise linear head for layer targets."""
    name = f"latent_head{layer}.w"
    if name not in params.tensors:
        d = params.config.d_model
        params.tensors[name] = T.Tensor(np.zeros((d, d)), requires_grad=True)
        params.tensors[f"latent_head{layer}.b"] = T.Tensor(np.zeros(d), requires_grad=True)


def _attention(h, params, prefix, cfg, table, positions):
    b, n, d = h.shape
    nh = cfg.n_heads
    dh = d // nh
    qkv = h @ params[prefix + "qkv.w"] + params[prefix + "qkv.b"]
    q = T.slice_axis(qkv, -1, 0, d)
    k = T.slice_axis(qkv, -1, d, 2 * d)
    v = T.slice_axis(qkv, -1, 2 * d, 3 * d)
    if cfg.positional == "rope" and cfg.rope_apply_site == "attention_qk":
        q = apply_rope(q, table, positions)
        k = apply_rope(k, table, positions)

    def split_heads(x):
        return T.transpose(T.reshape(x, (b, n, nh, dh)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax_rows(scores)
    mix = attn @ v  # (b, nh, n, dh)
    mix = T.reshape(T.transpose(mix, (0, 2, 1, 3)), (b, n, d))
    return mix @ params[prefix + "proj.w"] + params[prefix + "proj.b"]


def block_forward(x, params, idx, cfg, table, positions):
    """One pre-norm ViT block; returns the post-second-residual stream."""
    prefix = f"block{idx}."
    h = T.layer_norm(x, params[prefix + "norm1.g"], params[prefix + "norm1.b"], cfg.norm_eps)
    if cfg.positional == "rope" and cfg.rope_apply_site == "post_first_norm":
        h = apply_rope(h, table, positions)
    x = x + _attention(h, params, prefix, cfg, table, positions)
    h2 = T.layer_norm(x, params[prefix + "norm2.g"], params[prefix + "norm2.b"], cfg.norm_eps)
    h2 = T.gelu(h2 @ params[prefix + "mlp.w1"] + params[prefix + "mlp.b1"])
    return x + (h2 @ params[prefix + "mlp.w2"] + params[prefix + "mlp.b2"])


def embed(batch: TokenBatch, params: ModelParams, frozen=False) -> TokenBatch:
    """Affine projection of raw patches to d_model (plus learned positions)."""
    if batch.kind != "raw_patches":
        raise ConfigError("embed expects raw patches")

    def run():
        x = batch.tokens @ params["embed.w"] + params["embed.b"]
        if params.config.positional == "learned":
            pos = T.take(params["pos_embed"], _flat_index(batch.positions, params.config.grid), 0)
            x = x + pos
        return x

    if frozen:
        with T.no_grad():
            x = run()
    else:
        x = run()
    return TokenBatch(tokens=x, positions=batch.positions, kind="embedded")


def _flat_index(positions, grid):
    t, h, w = grid
    return (positions[:, 0] * h + positions[:, 1]) * w + positions[:, 2]


def encode(batch: TokenBatch, params: ModelParams, table: RotationTable,
           freeze_layer=0, record_layers=False, upto=None):
    """Run encoder blocks 1..enc_depth (or 1..upto).

    Blocks <= freeze_layer run without graph recording, so no activations
    are retained for backward. layer_outputs[l-1] is the post-residual
    output of block l when record_layers is set.
    """
    cfg = params.config
    last = cfg.enc_depth if upto is None else upto
    if freeze_layer > cfg.enc_depth:
        raise ConfigError("freeze_layer exceeds encoder depth")
    if batch.kind != "embedded":
        raise ConfigError("encode expects embedded tokens")
    x = batch.tokens
    outs = []
    for i in range(1, last + 1):
        if i <= freeze_layer:
            with T.no_grad():
                x = block_forward(x, params, i, cfg, table, batch.positions)
        else:
            x = block_forward(x, params, i, cfg, table, batch.positions)
        if record_layers:
            outs.append(x)
    return x, outs


def decoding_tokens(cfg: ModelConfig, table: RotationTable):
    """Deterministic positional latent per full-grid patch.

    Each token is the position's rotation applied to the fixed unit
    vector (1, ..., 1)/sqrt(D); zero learned parameters.
    """
    positions = grid_positions(cfg.grid)
    u = np.ones((cfg.n_tokens, cfg.d_model)) / math.sqrt(cfg.d_model)
    with T.no_grad():
        if cfg.positional == "rope":
            z = apply_rope(T.Tensor(u), table, positions).data
        else:
            z = u
    return z, positions


def decode(context, ctx_positions, latents, latent_positions, params: ModelParams,
           table: RotationTable):
    """Concatenate [latents; context], run decoder blocks, return latent rows."""
    cfg = params.config
    b = context.shape[0] if context is not None else 1
    n = latents.shape[0]
    lat = T.Tensor(np.broadcast_to(latents, (b, n, cfg.d_model)).copy())
    if context is not None and context.shape[1] > 0:
        all_tokens = T.concat([lat, context], axis=1)
        positions = np.concatenate([latent_positions, ctx_positions], axis=0)
    else:
        all_tokens = lat
        positions = latent_positions
    x = all_tokens
    for i in range(cfg.enc_depth + 1, cfg.depth + 1):
        x = block_forward(x, params, i, cfg, table, positions)
    return T.slice_axis(x, 1, 0, n)


def predict(out_tokens, target_layer, params: ModelParams):
    """Patch-wise linear head; target_layer 0 means pixels."""
    if target_layer == 0:
        return out_tokens @ params["pixel_head.w"] + params["pixel_head.b"]
    name = f"latent_head{target_layer}.w"
    if name not in params.tensors:
        raise ConfigError(f"no head for layer {target_layer}; run the freeze event first")
    return out_tokens @ params[name] + params[f"latent_head{target_layer}.b"]


def forward_upto(raw_batch: TokenBatch, params: ModelParams, table: RotationTable, k: int):
    """Stem + blocks 1..k on a raw token batch, honoring the caller's grad mode."""
    emb = embed(raw_batch, params)
    x, _ = encode(emb, params, table, freeze_layer=0, upto=k)
    return x
