"""AdamW training loop with warmup, cosine/constant schedule, clipping and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..errors import InvalidParameter
from .model import AstModel, cross_entropy, images_to_input, loss_and_grads, _forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # 5e-4 suits a randomly initialized desk-scale model.
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    warmup_steps: int = 20
    schedule: str = "cosine"
    max_epochs: int = 20
    early_stop_patience: int = 3
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0 or self.weight_decay < 0:
            raise InvalidParameter("learning rate and clip norm must be positive, weight decay non-negative")
        if self.early_stop_patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidParameter("patience, epochs and batch size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidParameter(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise InvalidParameter("warmup_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate_at(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` then cosine decay to zero (or constant)."""
    if tc.warmup_steps and step < tc.warmup_steps:
        return tc.learning_rate * (step + 1) / tc.warmup_steps
    if tc.schedule == "constant":
        return tc.learning_rate
    span = max(1, total_steps - tc.warmup_steps)
    progress = min(1.0, (step - tc.warmup_steps) / span)
    return tc.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, value: np.ndarray) -> bool:
    """Decay weight matrices and positional embeddings; never norms, biases or the class token."""
    return value.ndim >= 2


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= s
    return norm


@dataclass
class AdamW:
    tc: TrainConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def apply(self, model: AstModel, grads: dict[str, np.ndarray], lr: float) -> None:
        tc = self.tc
        self.step += 1
        c1 = 1.0 - tc.beta1**self.step
        c2 = 1.0 - tc.beta2**self.step
        for name in model.trainable_names():
            p, g = model.params[name], grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * (g * g)
            if tc.weight_decay and decays(name, p):
                p -= (lr * tc.weight_decay) * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + tc.eps)).astype(p.dtype)


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W, 3], uint8 or float in [0, 1]
    labels: np.ndarray  # [n] int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidParameter("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


def evaluate(model: AstModel, data: Dataset, batch_size: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and accuracy."""
    total, correct = 0.0, 0
    for s in range(0, len(data), batch_size):
        x = images_to_input(data.images[s : s + batch_size], model.config, model.dtype.type)
        y = data.labels[s : s + batch_size]
        logits, _, _ = _forward(model, x, keep_cache=False)
        loss, _ = cross_entropy(logits.astype(np.float64), y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(data), correct / len(data)


@dataclass
class TrainResult:
    model: AstModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(
    model: AstModel,
    train_set: Dataset,
    val_set: Dataset,
    tc: TrainConfig = TrainConfig(),
    monitor: Callable[[AstModel, Dataset], float] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train a copy of ``model``; returns the best-monitor weights and per-epoch history.

    ``monitor`` is higher-is-better and defaults to negative validation loss.
    ``max_steps`` caps optimizer steps (the run ends mid-epoch if reached).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise InvalidParameter("train and validation sets must be non-empty")
    model = model.copy()
    rng = np.random.default_rng(tc.seed)
    opt = AdamW(tc)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.max_epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    result = TrainResult(model)
    best_score, best_params, since_best = -math.inf, None, 0
    lr = norm = 0.0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(n)
        losses, seen = [], 0
        for s in range(0, n, tc.batch_size):
            if opt.step >= total_steps:
                break
            idx = order[s : s + tc.batch_size]
            loss, grads = loss_and_grads(model, train_set.images[idx], train_set.labels[idx])
            norm = clip_by_global_norm(grads, tc.grad_clip_norm)
            lr = learning_rate_at(opt.step, total_steps, tc)
            opt.apply(model, grads, lr)
            losses.append(loss * len(idx))
            seen += len(idx)
        val_loss, val_acc = evaluate(model, val_set)
        train_loss = sum(losses) / max(seen, 1)
        score = monitor(model, val_set) if monitor else -val_loss
        entry = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "monitor": score,
            "lr": lr,
            "grad_norm": norm,
            "steps": opt.step,
        }
        result.history.append(entry)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch, train_loss, val_loss, val_acc)
        if score > best_score:
            best_score, since_best, result.best_epoch = score, 0, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            since_best += 1
            if since_best >= tc.early_stop_patience:
                result.stopped_early = True
                break
        if opt.step >= total_steps:
            break
    if best_params is not None:
        model.params = best_params
    return result
