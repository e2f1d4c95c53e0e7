"""Thin layer over torch autograd plus an independent finite-difference checker."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import torch
from torch import Tensor

from ..errors import DimensionError


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"p{i}": p for i, p in enumerate(params)}


def backward(root: Tensor, params, retain_graph: bool = False) -> dict[str, Tensor]:
    """Gradient of scalar ``root`` w.r.t. each parameter; unused parameters get zeros."""
    if root.numel() != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    named = _named(params)
    grads = torch.autograd.grad(root, list(named.values()), retain_graph=retain_graph, allow_unused=True)
    return {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(named.items(), grads)}


@torch.no_grad()
def central_differences(fn: Callable[[], Tensor], params, h: float = 1e-5,
                        entries: Mapping[str, Iterable[int]] | None = None) -> dict[str, Tensor]:
    """``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every scalar entry (or the listed flat ``entries``)."""
    out = {}
    for name, p in _named(params).items():
        flat = p.data.view(-1)
        grad = torch.full_like(flat, float("nan"))
        idx = range(flat.numel()) if entries is None else entries.get(name, ())
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
        out[name] = grad.view_as(p)
    return out


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-6) -> Tensor:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    return (a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(floor, dtype=a.dtype))


def graph_size(root: Tensor) -> int:
    """Number of distinct backward nodes reachable from ``root``."""
    seen = set()
    stack = [root.grad_fn] if root.grad_fn is not None else []
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        stack.extend(n for n, _ in node.next_functions)
    return len(seen)
