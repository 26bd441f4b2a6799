"""Self-supervised video masked autoencoding with progressive layer
freezing and evolving prediction targets, on a minimal float64 autodiff
engine.

Submodules:
  tensor     reverse-mode autodiff primitives and composites
  rope       multi-axis rotary positional encoding
  masking    iid-random and multiblock patch masking
  model      ViT backbone, decoding latents, prediction heads
  optim      AdamW, cosine schedule, mini-warmup
  engine     freeze schedule, targets, training loops, checkpoints
  jepa       EMA-teacher latent-prediction variant
  costmodel  analytic FLOPs and peak-memory accounting
  analysis   convergence grid and collapse diagnostics
  data       synthetic video, checkpoints, metrics logs
  readout    frozen-feature cross-attention evaluation
  presets    named built-in configurations
  cli        operator entry points
"""

from .engine import (
    DivergenceError,
    FreezeContractError,
    FreezeSchedule,
    RunConfig,
    TargetSpec,
    freeze_layer_schedule,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
)
from .masking import MaskSpec
from .model import ModelConfig
from .optim import OptimConfig
from .presets import PRESETS, get_preset
from .tensor import NonFiniteError, ShapeMismatchError, Tensor, no_grad

__all__ = [
    "DivergenceError",
    "FreezeContractError",
    "FreezeSchedule",
    "MaskSpec",
    "ModelConfig",
    "NonFiniteError",
    "OptimConfig",
    "PRESETS",
    "RunConfig",
    "ShapeMismatchError",
    "TargetSpec",
    "Tensor",
    "freeze_layer_schedule",
    "get_preset",
    "init_state",
    "load_checkpoint",
    "no_grad",
    "run_training",
    "save_checkpoint",
    "train_step",
]

__version__ = "0.1.0"
