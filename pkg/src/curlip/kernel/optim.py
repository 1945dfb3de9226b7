"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .state import ModelState


def adamw_step(state: ModelState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> ModelState:
    """Apply one AdamW update to every trainable parameter of ``state`` in place.

    Weight decay is applied first (theta <- theta - lr*wd*theta), then the
    bias-corrected Adam step theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    Moments are created lazily; after the first call they are keyed 1:1 with
    the trainable parameters.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in state.trainable():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.name not in state.opt_moments:
            state.opt_moments[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.opt_moments[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
