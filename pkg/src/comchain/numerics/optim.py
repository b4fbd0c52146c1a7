"""AdamW with decoupled weight decay and a warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # names exempt from weight decay
    no_decay: frozenset[str] = frozenset()


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float | None = None
               ) -> tuple[dict[str, np.ndarray], OptimState]:
    """One AdamW update. Parameters without a gradient entry are left as-is.

    Returns a new parameter dict; input arrays are never modified.
    """
    extra = set(grads) - set(params)
    if extra:
        raise KeyError(f"gradients for unknown parameters: {sorted(extra)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    lr = state.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = m_new.get(name)
        v = v_new.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_new[name], v_new[name] = m, v
        if state.weight_decay and name not in state.no_decay:
            p = p * (1.0 - lr * state.weight_decay)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - lr * step).astype(params[name].dtype, copy=False)
    new_state = OptimState(state.lr, b1, b2, state.eps, state.weight_decay, t,
                           m_new, v_new, state.no_decay)
    return out, new_state


def cosine_lr(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    e = step - warmup
    es = max(total - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * min(e, es) / es)) * base_lr
