"""Adam with decoupled weight decay, warmup + cosine schedule and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergedError


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_tokens: int = 8192
    clip_threshold: float = 1.0
    weight_decay: float = 0.01
    z_coeff: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optim.lr must be positive")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("optim.warmup must be >= 0 and optim.total_steps >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps < 0 or self.weight_decay < 0 or self.z_coeff < 0:
            raise ConfigError("optim.eps, optim.weight_decay and optim.z_coeff must be non-negative")
        if not self.clip_threshold > 0:
            raise ConfigError("optim.clip must be positive")
        if self.batch_tokens < 1:
            raise ConfigError("optim.batch_tokens must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``min_lr_ratio * lr`` at ``total_steps``."""
    if step < 1:
        raise ConfigError(f"steps are 1-based, got {step}")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global(grads: list[np.ndarray], threshold: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``threshold``.

    Returns the norm before clipping. Raises DivergedError on a non-finite norm.
    """
    if not threshold > 0:
        raise ConfigError("clip threshold must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise DivergedError(f"gradient norm is {norm}")
    if norm > threshold:
        factor = threshold / norm
        for g in grads:
            g *= factor
    return norm


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """Bias-corrected Adam step with decoupled decay, applied in place to ``param``.

    Returns the applied delta. With ``eps == 0`` an entry whose second moment is
    exactly zero gets a zero update instead of 0/0.
    """
    if not np.all(np.isfinite(grad)):
        raise DivergedError("non-finite gradient")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    denom = np.sqrt(v_hat)
    if eps:
        denom += eps
        step = m_hat / denom
    else:
        step = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
    delta = -lr * step
    if weight_decay:
        delta -= lr * weight_decay * param
    param += delta
    return delta


class Adam:
    """Adam over a model's ParamTensors.

    Weight decay applies to weight matrices only; gates and RMSNorm gains are
    never decayed. Frozen gates (``gate_trainable=False``) are skipped.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.states: dict[str, AdamState] = {}

    def trainable(self, model):
        """Yield ``(key, array, grad, decays)`` for every trainable array."""
        for name, p in model.params.items():
            yield name, p.weight, p.grad_weight, p.is_matrix
            if p.gate is not None and p.gate_trainable:
                yield name + ".gate", p.gate, p.grad_gate, False

    def grads(self, model) -> list[np.ndarray]:
        return [g for _, _, g, _ in self.trainable(model)]

    def step(self, model, lr: float) -> dict[str, np.ndarray]:
        cfg = self.cfg
        deltas = {}
        for key, arr, grad, decays in self.trainable(model):
            state = self.states.get(key)
            if state is None:
                state = self.states[key] = AdamState.like(arr)
            wd = cfg.weight_decay if decays else 0.0
            deltas[key] = adam_step(arr, grad, state, lr, cfg.beta1, cfg.beta2, cfg.eps, wd)
        return deltas
