"""Swappable point geometry for the sequence model.

``LorentzGeometry`` is the real thing. ``EuclideanGeometry`` replaces the maps
with identities, Möbius addition with ``+`` and the Lorentz distance with the
squared L2 distance; it backs the fully Euclidean ablation.
"""

from __future__ import annotations

import torch
from torch import Tensor

from . import manifold as M


class LorentzGeometry:
    name = "lorentz"

    def __init__(self, c: float = M.CURVATURE):
        self.c = c

    def point_dim(self, n: int) -> int:
        return n + 1

    def expmap0(self, v: Tensor) -> Tensor:
        return M.exp_o(v, self.c)

    def logmap0(self, x: Tensor) -> Tensor:
        return M.log_o(x, self.c, check=False)

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        return M.mobius_add(x, y, self.c)

    def linear(self, x: Tensor, weight: Tensor) -> Tensor:
        return M.lorentz_linear(x, weight, self.c)

    def pairwise_sq_dist(self, x: Tensor, table: Tensor) -> Tensor:
        return M.pairwise_sq_dist(x, table, self.c)

    def origin_like(self, x: Tensor) -> Tensor:
        o = torch.zeros_like(x)
        o[..., 0] = self.c**0.5
        return o


class EuclideanGeometry:
    name = "euclidean"
    c = 0.0

    def point_dim(self, n: int) -> int:
        return n

    def expmap0(self, v: Tensor) -> Tensor:
        return v

    def logmap0(self, x: Tensor) -> Tensor:
        return x

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        return x + y

    def linear(self, x: Tensor, weight: Tensor) -> Tensor:
        return x @ weight.T

    def pairwise_sq_dist(self, x: Tensor, table: Tensor) -> Tensor:
        sq = (x * x).sum(-1, keepdim=True) + (table * table).sum(-1) - 2.0 * x @ table.T
        return sq.clamp_min(0.0)

    def origin_like(self, x: Tensor) -> Tensor:
        return torch.zeros_like(x)


def make_geometry(hyperbolic: bool = True, c: float = M.CURVATURE):
    return LorentzGeometry(c) if hyperbolic else EuclideanGeometry()
