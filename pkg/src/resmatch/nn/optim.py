"""Adam with bias correction and optional global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(state: AdamState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray | Tensor] | None = None) -> AdamState:
    """One in-place Adam update.  ``grads`` defaults to each param's ``.grad``."""
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                grads[name] = np.zeros_like(p.data)
            else:
                grads[name] = p.grad.data
    else:
        grads = {k: (g.data if isinstance(g, Tensor) else np.asarray(g)) for k, g in grads.items()}

    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise NumericalError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")

    if state.clip_norm is not None:
        norm = global_norm(grads)
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state
