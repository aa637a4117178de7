"""AdamW with decoupled weight decay and frozen-row support."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, TrainingError
from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def _row_mask(p: Tensor) -> np.ndarray | None:
    if not p.frozen_rows:
        return None
    mask = np.ones((p.shape[0],) + (1,) * (p.ndim - 1), dtype=p.data.dtype)
    mask[list(p.frozen_rows)] = 0
    return mask


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               names: Sequence[str] | None = None) -> None:
    """One in-place AdamW update.

    Weight decay ``theta -= lr * wd * theta`` is applied first, then the
    bias-corrected Adam step. Rows listed in ``Tensor.frozen_rows`` are left
    untouched and their moments stay zero. Parameters whose gradient is
    None are skipped.
    """
    names = names or [p.name or f"param[{i}]" for i, p in enumerate(params)]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, name in zip(params, grads, names):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        mask = _row_mask(p)
        if mask is not None:
            g = g * mask
        decay = state.lr * state.weight_decay * p.data
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if mask is not None:
            decay *= mask
            update *= mask
        p.data -= decay
        p.data -= update


class AdamW:
    def __init__(self, params: Mapping[str, Tensor] | Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if isinstance(params, Mapping):
            self.names, self.params = list(params), list(params.values())
        else:
            self.params = list(params)
            self.names = [p.name or f"param[{i}]" for i, p in enumerate(self.params)]
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
