"""AdamW with decoupled weight decay, plus the warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    def __init__(self, names):
        super().__init__("no gradient for trainable parameter(s): " + ", ".join(names))
        self.names = list(names)


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Only tensors with requires_grad=True are admitted into the state;
    moments start at zero and the step counter t increments by one per step.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = [(name, p) for name, p in params if p.requires_grad]
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr=None):
        """One AdamW update; gradients are consumed (cleared) afterwards."""
        if lr is None:
            lr = self.lr
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        missing = [name for name, p in self.params if p.grad is None]
        if missing:
            raise MissingGradError(missing)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
        self.zero_grad()

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    grads = []
    for _, p in params:
        if p.grad is not None:
            grads.append(p.grad)
            sq += float((p.grad * p.grad).sum())
    norm = sq ** 0.5
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


def lr_at(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to base_lr, then linear decay to zero at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0.0 < warmup_ratio < 1.0:
        raise ValueError(f"warmup_ratio must be in (0, 1), got {warmup_ratio}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = warmup_ratio * total_steps
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)
