"""Bias-corrected Adam.

`adam_step` is a pure function: it returns fresh parameter arrays and a new
state, so two identical calls give identical outputs. The training loop is
responsible for writing results back into its tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            step=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state):
    """One Adam update. Returns (new_params, new_state).

    `params` and `grads` are sequences of ndarrays, shape-congruent with the
    moment estimates in `state`. A None grad is treated as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params.append(p - update)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=t, m=new_m, v=new_v
    )


def clip_global_norm(grads, max_norm):
    """Scale all grads so their joint L2 norm is at most max_norm."""
    if max_norm is None or max_norm <= 0:
        return grads
    total = 0.0
    for g in grads:
        if g is not None:
            total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads]
