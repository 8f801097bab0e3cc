"""
Deterministic AdamW with cosine annealing and global-norm clipping.

Step ``t`` (1-based) runs at ``cosine_lr(t - 1, T, lr)``: the first update
uses the base learning rate and the schedule reaches zero only after the
last step. Gradients are clipped before they enter the moments; weight
decay is decoupled and applied before the Adam update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ConfigError, NonFiniteError
from .factmodel import ParamSet


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    """``base_lr · ½(1 + cos(π·t/T))`` for ``0 <= t <= T``."""
    if total <= 0:
        raise ConfigError("total_steps", "must be positive")
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside schedule [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True, slots=True)
class OptimConfig:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    total_steps: int = 300

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("betas", "must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm", "must be positive or null")
        if self.total_steps < 0:
            raise ConfigError("total_steps", "must be non-negative")


@dataclass(slots=True)
class OptimState:
    """Step counter and Adam moments for the trainable entries."""

    config: OptimConfig
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: OptimConfig, params: ParamSet) -> "OptimState":
        names = params.trainable_names()
        return cls(
            config,
            0,
            {n: np.zeros_like(params[n]) for n in names},
            {n: np.zeros_like(params[n]) for n in names},
        )


def clip_gradients(
    grads: Mapping[str, np.ndarray], clip_norm: float | None
) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``clip_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip_norm is None or total <= clip_norm:
        return dict(grads), total
    factor = clip_norm / total
    return {n: g * factor for n, g in grads.items()}, total


def step(
    state: OptimState,
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    mask: Mapping[str, np.ndarray] | None = None,
) -> Tuple[OptimState, ParamSet]:
    """
    One AdamW update of every unfrozen entry.

    ``mask`` (0/1 arrays) restricts which coordinates may move; masked-out
    coordinates keep their value and skip weight decay.
    """
    cfg = state.config
    names = params.trainable_names()
    if set(names) != set(state.m):
        raise ValueError("trainable entries changed since the optimizer state was created")
    for n in names:
        if n not in grads:
            raise ValueError(f"missing gradient for trainable entry {n!r}")
        if not np.all(np.isfinite(grads[n])):
            raise NonFiniteError(f"gradient[{n}]")

    t = state.step + 1
    lr = cosine_lr(t - 1, cfg.total_steps, cfg.lr)
    clipped, _ = clip_gradients({n: grads[n] for n in names}, cfg.clip_norm)
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    updated: Dict[str, np.ndarray] = {}
    for n in names:
        g = clipped[n]
        m = b1 * state.m[n] + (1.0 - b1) * g
        v = b2 * state.v[n] + (1.0 - b2) * (g * g)
        p = params[n] * (1.0 - lr * cfg.weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if mask is not None and n in mask:
            p = np.where(mask[n] > 0, p, params[n])
        new_m[n], new_v[n], updated[n] = m, v, p

    return OptimState(cfg, t, new_m, new_v), params.replace(updated)


class AdamW:
    """Stateful convenience wrapper around ``step``."""

    def __init__(self, config: OptimConfig, params: ParamSet) -> None:
        self.state = OptimState.create(config, params)

    def step(
        self,
        params: ParamSet,
        grads: Mapping[str, np.ndarray],
        mask: Mapping[str, np.ndarray] | None = None,
    ) -> ParamSet:
        self.state, params = step(self.state, params, grads, mask)
        return params
