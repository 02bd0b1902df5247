"""Adam optimizer over named parameter dicts.

Only the learning rate is meant to vary between runs; beta1=0.9,
beta2=0.999, eps=1e-8 are fixed defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_init", "adam_update"]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for k, p in params.items():
        state.m[k] = np.zeros_like(p.data, dtype=np.float64)
        state.v[k] = np.zeros_like(p.data, dtype=np.float64)
    return state


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                state: AdamState) -> AdamState:
    """One Adam step, in place on the parameter data.

    Args:
        params: named trainable tensors.
        grads: gradient per name; missing names are skipped.
        state: moment estimates and step counter; mutated and returned.

    Raises:
        FloatingPointError: any non-finite gradient entry.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        g64 = g.astype(np.float64, copy=False)
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g64
        v *= state.beta2
        v += (1.0 - state.beta2) * (g64 * g64)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data[...] = (p.data.astype(np.float64) - step).astype(np.float32)
    return state
