from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adamw_step(params, grads, state, lr, weight_decay=0.0, betas=(BETA1, BETA2), eps=EPS):
    """One bias-corrected AdamW update with decoupled weight decay, in place.

    ``state`` maps ``id(param)`` to ``(step, m, v)``. Params whose grad is
    ``None`` are skipped.
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if g is None:
            continue
        data = p.data if hasattr(p, "data") else p
        step, m, v = state.get(id(p), (0, np.zeros_like(data), np.zeros_like(data)))
        if m.shape != data.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {data.shape}")
        step += 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        if weight_decay:
            data *= 1.0 - lr * weight_decay
        data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        state[id(p)] = (step, m, v)


class AdamW:
    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-4, betas=(BETA1, BETA2), eps: float = EPS):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, params) -> None:
        params = list(params)
        adamw_step(params, [p.grad for p in params], self.state, self.lr, self.weight_decay, self.betas, self.eps)


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale grads so their joint L2 norm is at most ``max_norm``; return the norm before clipping."""
    params = list(params)
    norm = grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm
