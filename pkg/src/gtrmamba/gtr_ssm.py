"""Context-driven selective SSM whose state lives in the tangent space at the origin.

Per step ``t`` (all products elementwise over the ``d`` channels)::

    dt_t  = softplus(A_proj(u_t) * dt_weight + dt_bias) * gamma_t
    Abar  = exp(dt_t * a)                 a = -log(1..d)
    Bbar  = (exp(dt_t * a) - 1) / a       (Taylor series near a * dt = 0)
    Bbar *= B_proj(u_t) * sigmoid(C_proj(u_t))
    h_t   = Abar * h_{t-1} + Bbar * log_o(q_t)          h_0 = 0
    H_t   = exp_o(h_t) (+) exp_o(bias_anchor)
    E_t   = H_{t-1} (+) LorentzLinear(H_t)
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, NumericError
from .geometry import LorentzGeometry

TAYLOR_SWITCH = 1e-4


def fixed_decay(d: int, dtype=torch.float64) -> Tensor:
    """Diagonal of ``A = -diag(log 1, ..., log d)``."""
    return -torch.log(torch.arange(1, d + 1, dtype=dtype))


def discretize(dt: Tensor, a: Tensor, switch: float = TAYLOR_SWITCH) -> tuple[Tensor, Tensor]:
    """Zero-order-hold ``(Abar, Bbar)`` for a diagonal ``a`` and positive step sizes ``dt``."""
    if (dt <= 0).any():
        raise NumericError("step sizes must be strictly positive")
    x = dt * a
    small = x.abs() < switch
    a_safe = torch.where(small, torch.ones_like(a), a)
    exact = torch.expm1(torch.where(small, torch.ones_like(x), x)) / a_safe
    taylor = dt * (1.0 + x / 2.0 + x * x / 6.0)
    return torch.exp(x), torch.where(small, taylor, exact)


def _inv_softplus(y: Tensor) -> Tensor:
    return y + torch.log(-torch.expm1(-y))


class GTRLayer(nn.Module):
    def __init__(self, d: int, d_ctx: int, geometry=None, dt_range=(0.1, 1.0), seed: int = 0):
        super().__init__()
        self.d = d
        self.geometry = geometry or LorentzGeometry()
        self.register_buffer("a", fixed_decay(d))
        g = torch.Generator().manual_seed(seed)
        lo, hi = math.log(dt_range[0]), math.log(dt_range[1])
        dt0 = torch.exp(lo + (hi - lo) * torch.rand(d, generator=g, dtype=torch.float64))
        self.dt_weight = nn.Parameter(torch.ones(d, dtype=torch.float64))
        self.dt_bias = nn.Parameter(_inv_softplus(dt0))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.A_proj = nn.Linear(d_ctx, d)
            self.B_proj = nn.Linear(d_ctx, d)
            self.C_proj = nn.Linear(d_ctx, d)
        nn.init.ones_(self.B_proj.bias)
        self.bias_anchor = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.out_weight = nn.Parameter(torch.eye(d, dtype=torch.float64))
        self.to(torch.float64)

    def step_size(self, u_c: Tensor, gamma: Tensor) -> Tensor:
        pre = self.A_proj(u_c) * self.dt_weight + self.dt_bias
        return F.softplus(pre) * gamma.unsqueeze(-1)

    def modulate_input(self, b_bar: Tensor, u_c: Tensor) -> Tensor:
        return b_bar * self.B_proj(u_c) * torch.sigmoid(self.C_proj(u_c))

    def forward(self, q: Tensor, u_c: Tensor, gamma: Tensor, return_aux: bool = False):
        """``q`` (..., L, point_dim), ``u_c`` (..., L, d_ctx), ``gamma`` (..., L)."""
        if q.shape[-2] < 1:
            raise DimensionError("scan needs at least one step")
        g = self.geometry
        dt = self.step_size(u_c, gamma)
        a_bar, b_bar = discretize(dt, self.a)
        inc = self.modulate_input(b_bar, u_c) * g.logmap0(q)

        h = torch.zeros_like(inc[..., 0, :])
        states = []
        for t in range(inc.shape[-2]):
            h = a_bar[..., t, :] * h + inc[..., t, :]
            states.append(h)
        hs = torch.stack(states, dim=-2)
        bad = ~torch.isfinite(hs).reshape(-1, *hs.shape[-2:]).all(dim=-1).all(dim=0)
        if bad.any():
            raise NumericError(f"SSM state became non-finite at step {int(bad.nonzero()[0])}")

        anchor = g.expmap0(self.bias_anchor)
        H = g.add(g.expmap0(hs), anchor)
        H0 = g.add(g.expmap0(torch.zeros_like(hs[..., :1, :])), anchor)
        H_prev = torch.cat([H0, H[..., :-1, :]], dim=-2)
        E = g.add(H_prev, g.linear(H, self.out_weight))
        if return_aux:
            return E, {"dt": dt, "h": hs, "H": H, "a_bar": a_bar}
        return E


def scan(layer: GTRLayer, q: Tensor, u_c: Tensor, gamma: Tensor, return_aux: bool = False):
    return layer(q, u_c, gamma, return_aux=return_aux)


def stack(layers, q: Tensor, u_c: Tensor, gamma: Tensor, return_aux: bool = False):
    """Feed each layer's trajectory embeddings to the next; returns the last layer's output."""
    if len(layers) < 1:
        raise ValueError("need at least one layer")
    aux = []
    for layer in layers:
        out = layer(q, u_c, gamma, return_aux=return_aux)
        if return_aux:
            q, a = out
            aux.append(a)
        else:
            q = out
    return (q, aux) if return_aux else q
