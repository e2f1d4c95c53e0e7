from __future__ import annotations

from typing import Mapping

import torch
from torch import Tensor

from ..errors import TrainingError


class Adam:
    """Adam with optional global-norm clipping and a NaN guard that names the culprit."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.params: dict[str, Tensor] = dict(named_params)
        self.clip_norm = clip_norm
        self._opt = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)

    def zero_grad(self) -> None:
        self._opt.zero_grad(set_to_none=True)

    def step(self, grads: Mapping[str, Tensor] | None = None) -> None:
        if grads is not None:
            for name, g in grads.items():
                self.params[name].grad = g
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if self.clip_norm:
            torch.nn.utils.clip_grad_norm_([p for p in self.params.values() if p.grad is not None],
                                           self.clip_norm)
        self._opt.step()

    def state_dict(self) -> dict:
        return self._opt.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self._opt.load_state_dict(state)
