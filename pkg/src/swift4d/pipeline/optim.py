"""AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_adamw_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adamw_step(params: dict, state: dict, hyper: AdamWHyper, lr: float | None = None) -> dict:
    """One in-place update of ``params`` (name -> Tensor with ``.grad``).

    ``lr`` overrides ``hyper.lr`` (the scheduled value). Parameters without a
    gradient are treated as having a zero gradient. Decay is decoupled:
    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``.
    """
    lr = hyper.lr if lr is None else lr
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state["m"][name], state["v"][name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
    return state


def lr_schedule(step: float, total_steps: int, base_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warm-up, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
