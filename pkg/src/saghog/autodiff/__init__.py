from . import tensor as ops
from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .nn import LayerNorm, Linear, Module, param
from .optim import AdamW, OptimizerState, TrainLog, clip_gradients, cosine_warmup_lr, global_norm
from .tensor import Tensor, ShapeError, no_grad

__all__ = [
    "AdamW",
    "LayerNorm",
    "Linear",
    "Module",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "TrainLog",
    "clip_gradients",
    "cosine_warmup_lr",
    "global_norm",
    "load_checkpoint",
    "no_grad",
    "ops",
    "param",
    "read_meta",
    "save_checkpoint",
]
