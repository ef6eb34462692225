"""AdamW with decoupled weight decay, global-norm clipping, linear warmup."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, NonFiniteError


@dataclass
class AdamWState:
    """Per-parameter optimizer state and hyperparameters."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    @classmethod
    def for_param(cls, param: Tensor, lr: float, weight_decay: float = 1e-4,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamWState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
                   m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adamw_step(param: Tensor, grad, state: AdamWState, lr_scale: float = 1.0) -> Tensor:
    """One AdamW update, in place on param.data.

    Weight decay is decoupled: param -= lr*wd*param before the moment update
    term, so decay happens even at zero gradient.
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if g.shape != param.data.shape:
        raise ValueError("gradient shape does not match parameter")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient contains NaN or Inf")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mh = state.m / (1.0 - state.beta1 ** state.step)
    vh = state.v / (1.0 - state.beta2 ** state.step)
    lr = state.lr * lr_scale
    param.data = (param.data
                  - lr * state.weight_decay * param.data
                  - lr * mh / (np.sqrt(vh) + state.eps)).astype(param.data.dtype, copy=False)
    return param


def global_grad_norm(grads) -> float:
    """L2 norm over the concatenation of all gradients (float64 accumulation)."""
    total = 0.0
    for g in grads:
        a = g.data if isinstance(g, Tensor) else np.asarray(g)
        total += float(np.sum(a.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            a = g.data if isinstance(g, Tensor) else g
            a *= scale
    return norm


def warmup_scale(step: int, warmup_steps: int) -> float:
    """Linear warmup multiplier: step/warmup_steps, capped at 1."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


class AdamW:
    """Optimizer over named parameter groups with shared global-norm clipping.

    groups: list of (params dict name->Tensor, lr).  All groups share
    weight_decay and the clip threshold; the global norm is computed over
    every parameter in every group before any update.
    """

    def __init__(self, groups, weight_decay: float = 1e-4, clip_norm: float = 1.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(groups, dict):
            raise TypeError("pass [(params, lr), ...]")
        self.groups = []
        for params, lr in groups:
            states = {name: AdamWState.for_param(p, lr, weight_decay, beta1, beta2, eps)
                      for name, p in params.items()}
            self.groups.append((params, states))
        self.clip_norm = clip_norm

    def parameters(self):
        for params, _ in self.groups:
            yield from params.values()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> float:
        """Clip then update every parameter that has a gradient.

        Returns the pre-clip global gradient norm.
        """
        named = []
        for params, states in self.groups:
            for name, p in params.items():
                if p.grad is None:
                    continue
                named.append((p, p.grad, states[name]))
        norm = clip_global_norm([g for _, g, _ in named], self.clip_norm)
        for p, g, st in named:
            adamw_step(p, g, st, lr_scale=lr_scale)
        return norm
