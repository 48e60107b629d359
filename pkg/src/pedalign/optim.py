"""AdamW with linear warmup and cosine decay, over dicts of numpy arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import ALGOS

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 16
    epochs: int = 3
    weight_decay: float = 0.05
    warmup_ratio: float = 0.1
    seed: int = 0
    beta: float = 0.1
    algo: str = "dpo"
    lambda_d: float = 1.0
    lambda_u: float = 1.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {', '.join(ALGOS)}")

    @classmethod
    def sft(cls, **overrides) -> "TrainConfig":
        return cls(**{"learning_rate": 1e-2, **overrides})

    @classmethod
    def lhp(cls, **overrides) -> "TrainConfig":
        return cls(**{"learning_rate": 1e-3, **overrides})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def lr_scale(step_fraction: float, warmup_ratio: float) -> float:
    """Multiplier on the base learning rate at a point in training."""
    f = min(max(step_fraction, 0.0), 1.0)
    if warmup_ratio > 0 and f < warmup_ratio:
        return f / warmup_ratio
    if warmup_ratio >= 1.0:
        return 1.0
    progress = (f - warmup_ratio) / (1.0 - warmup_ratio)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
    step_fraction: float,
) -> float:
    """One in-place AdamW update. Returns the effective learning rate."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeMismatch("parameter, gradient and state names differ")
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeMismatch(f"shape mismatch for {k!r}")
    state.step += 1
    lr = cfg.learning_rate * lr_scale(step_fraction, cfg.warmup_ratio)
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for k in sorted(params):
        p, g = params[k], grads[k]
        m, v = state.m[k], state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if lr == 0.0:
            continue
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return lr
