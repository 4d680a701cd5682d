"""Plain SGD, Adam with L2 weight decay, and polynomial learning-rate decay.

Updates are functional: they return fresh parameter dicts and leave the inputs
untouched, which keeps the frozen side of an alternating update bitwise stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


def _check_shapes(params: Mapping, grads: Mapping) -> None:
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if np.shape(grads[name]) != np.shape(p):
            raise ValueError(
                f"gradient shape {np.shape(grads[name])} does not match parameter {name!r} {np.shape(p)}"
            )


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float):
    _check_shapes(params, grads)
    return {name: (p - lr * grads[name]).astype(p.dtype, copy=False) for name, p in params.items()}


@dataclass
class OptimState:
    """Adam moments plus the step counter and schedule settings."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    base_lr: float = 1e-3
    power: float = 0.9
    t_max: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "OptimState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )

    def lr(self) -> float:
        if self.t_max <= 0:
            return self.base_lr
        return poly_decay(self.base_lr, self.t, self.t_max, self.power)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
):
    """One bias-corrected Adam update.

    ``weight_decay * w`` is added to the gradient before the moment updates
    (classic L2, not the decoupled variant).  ``lr`` defaults to the state's
    scheduled rate at its current step.  Returns ``(new_params, new_state)``.
    """
    _check_shapes(params, grads)
    if lr is None:
        lr = state.lr()
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_p, OptimState(new_m, new_v, t, state.base_lr, state.power, state.t_max)


def poly_decay(base_lr: float, t: int, t_max: int, power: float = 0.9) -> float:
    """base_lr * (1 - t / t_max) ** power, clamped to 0 once t >= t_max."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if t >= t_max:
        return 0.0
    return base_lr * (1.0 - t / t_max) ** power
