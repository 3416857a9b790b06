"""Adam optimizer and gradient clipping over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step length mismatch: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != g.shape or p.data.shape != state.m[i].shape:
            raise ContractError(
                f"adam_step shape mismatch at index {i}: param {p.data.shape}, "
                f"grad {g.shape}, state {state.m[i].shape}"
            )
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm and total > 0.0:
        s = max_norm / total
        grads = [g * s for g in grads]
    return grads, total
