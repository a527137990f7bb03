"""Adam optimizer over dicts of named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
    """One bias-corrected Adam update. Returns new (params, state); inputs are not mutated."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p = np.asarray(p)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)
