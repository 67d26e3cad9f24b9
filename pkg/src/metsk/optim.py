"""Plain SGD and bias-corrected Adam over named parameter sets.

Both steps are pure functions: they return fresh parameter dicts and (for
Adam) a fresh state, leaving their inputs untouched, so a training loop
can be replayed or forked from any point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor


def _check_pairing(params: Mapping[str, Tensor], grads: Mapping[str, Tensor]):
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ValueError(f"parameter/gradient name mismatch: {sorted(missing)}")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"shape mismatch for '{name}': param {params[name].shape} "
                f"vs grad {grads[name].shape}"
            )


def _check_lr(lr: float):
    # lr == 0 is legal and must leave parameters bitwise unchanged.
    if not np.isfinite(lr) or lr < 0.0:
        raise ValueError(f"learning rate must be a finite non-negative float, got {lr}")


def sgd_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float
) -> dict:
    """One vanilla gradient step: p <- p - lr * g."""
    _check_lr(lr)
    _check_pairing(params, grads)
    if lr == 0.0:
        return dict(params)
    return {
        name: Tensor(params[name].data - lr * grads[name].data, requires_grad=True)
        for name in params
    }


@dataclass
class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        m = {n: np.zeros(p.shape) for n, p in params.items()}
        v = {n: np.zeros(p.shape) for n, p in params.items()}
        return cls(m=m, v=v, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    lr: float,
) -> tuple:
    """Standard bias-corrected Adam update; returns (new state, new params)."""
    _check_lr(lr)
    _check_pairing(params, grads)
    if set(state.m) != set(params):
        raise ValueError("Adam state does not match the parameter set")
    for name in params:
        if state.m[name].shape != params[name].shape:
            raise ValueError(f"Adam accumulator shape mismatch for '{name}'")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_m, new_v, new_p = {}, {}, {}
    for name in params:
        g = grads[name].data
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_m[name] = m
        new_v[name] = v
        if lr == 0.0:
            new_p[name] = params[name]
        else:
            new_p[name] = Tensor(
                params[name].data - lr * m_hat / (np.sqrt(v_hat) + eps),
                requires_grad=True,
            )
    return (
        AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=eps),
        new_p,
    )
