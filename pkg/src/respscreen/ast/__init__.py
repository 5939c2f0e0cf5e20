"""Desk-scale audio spectrogram transformer."""

from .attention import AttentionMap, class_attention_map
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    AstConfig,
    AstModel,
    LoraSpec,
    forward,
    loss_and_grads,
    lora_wrap,
    parameter_count,
    patchify,
    predict_proba,
    trainable_fraction,
)
from .train import Dataset, TrainConfig, TrainResult, train

__all__ = [
    "AstConfig", "AstModel", "AttentionMap", "Dataset", "LoraSpec", "TrainConfig", "TrainResult",
    "class_attention_map", "forward", "load_checkpoint", "loss_and_grads", "lora_wrap",
    "parameter_count", "patchify", "predict_proba", "save_checkpoint", "train", "trainable_fraction",
]
