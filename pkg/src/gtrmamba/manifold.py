"""Lorentz-model geometry with all maps based at the origin.

Points on the hyperboloid are ``(..., n + 1)`` tensors with the time
coordinate first; tangent vectors at the origin are stored by their ``n``
spatial coordinates only (the time coordinate of a tangent vector at ``o`` is
always zero). Every function broadcasts over leading dimensions and is
differentiable through torch autograd.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .errors import DimensionError, ManifoldError, NumericError

CURVATURE = 1.0
SMALL_NORM = 1e-7
MANIFOLD_TOL = 1e-6
DTYPE = torch.float64


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def origin(n: int, c: float = CURVATURE, dtype=DTYPE) -> Tensor:
    o = torch.zeros(n + 1, dtype=dtype)
    o[0] = math.sqrt(c)
    return o


def lorentz_inner(x, y) -> Tensor:
    """``-x0*y0 + sum_i xi*yi`` over the last dimension."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-1] < 2:
        raise DimensionError("Lorentz vectors need at least 2 coordinates")
    prod = x * y
    return prod[..., 1:].sum(-1) - prod[..., 0]


def check_on_manifold(x: Tensor, c: float = CURVATURE, tol: float = MANIFOLD_TOL) -> None:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite coordinates")
    # Relative to x0^2: rounding in <x,x> scales with the size of the point.
    resid = (lorentz_inner(x, x) + c).abs() / x[..., 0].detach().square().clamp_min(1.0)
    if (resid > tol).any() or (x[..., 0] <= 0).any():
        raise ManifoldError(f"point off the hyperboloid (max residual {resid.max().item():.3g})")


def project_to_hyperboloid(raw, c: float = CURVATURE) -> Tensor:
    """Keep the spatial coordinates and recompute the time coordinate."""
    raw = as_tensor(raw)
    space = raw[..., 1:]
    time = torch.sqrt(c + (space * space).sum(-1, keepdim=True))
    return torch.cat([time, space], dim=-1)


def from_spatial(space: Tensor, c: float = CURVATURE) -> Tensor:
    time = torch.sqrt(c + (space * space).sum(-1, keepdim=True))
    return torch.cat([time, space], dim=-1)


def sq_lorentz_dist(x, y, c: float = CURVATURE, check: bool = True) -> Tensor:
    """Squared Lorentz distance ``-2c - 2<x, y>_L``, clamped at zero."""
    x, y = as_tensor(x), as_tensor(y)
    if check:
        check_on_manifold(x, c)
        check_on_manifold(y, c)
    return (-2.0 * c - 2.0 * lorentz_inner(x, y)).clamp_min(0.0)


def pairwise_sq_dist(x: Tensor, table: Tensor, c: float = CURVATURE) -> Tensor:
    """Squared distances from every point in ``x`` (..., n+1) to every row of ``table`` (K, n+1)."""
    inner = x[..., 1:] @ table[:, 1:].T - x[..., :1] * table[:, 0]
    return (-2.0 * c - 2.0 * inner).clamp_min(0.0)


def exp_o(v, c: float = CURVATURE) -> Tensor:
    """Exponential map at the origin: tangent ``(..., n)`` -> hyperboloid ``(..., n+1)``."""
    v = as_tensor(v)
    if not torch.isfinite(v).all():
        raise NumericError("exp_o: non-finite tangent vector")
    sqc = math.sqrt(c)
    sq = (v * v).sum(-1, keepdim=True)
    small = sq < SMALL_NORM**2
    # double-where keeps the unused branch's gradient finite at v = 0
    r = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    space = torch.where(small, v, sqc * torch.sinh(r / sqc) * v / r)
    return from_spatial(space, c)


def log_o(x, c: float = CURVATURE, check: bool = True) -> Tensor:
    """Logarithmic map at the origin: hyperboloid ``(..., n+1)`` -> tangent ``(..., n)``.

    The geodesic radius is evaluated as ``sqrt(c) * asinh(|x_s| / sqrt(c))``,
    which equals ``sqrt(c) * arccosh(x0 / sqrt(c))`` on the hyperboloid but has
    no cancellation near the origin.
    """
    x = as_tensor(x)
    if check:
        if not torch.isfinite(x).all():
            raise NumericError("log_o: non-finite point")
        if (x[..., 0] < math.sqrt(c) * (1.0 - MANIFOLD_TOL)).any():
            raise ManifoldError("log_o: time coordinate below sqrt(c), outside the arccosh domain")
    sqc = math.sqrt(c)
    space = x[..., 1:]
    sq = (space * space).sum(-1, keepdim=True)
    small = sq < SMALL_NORM**2
    n = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    return torch.where(small, space, sqc * torch.asinh(n / sqc) * space / n)


def lorentz_to_poincare(x, c: float = CURVATURE) -> Tensor:
    """Stereographic projection onto the ball of radius ``sqrt(c)``."""
    x = as_tensor(x)
    sqc = math.sqrt(c)
    return sqc * x[..., 1:] / (x[..., :1] + sqc)


def poincare_to_lorentz(p, c: float = CURVATURE) -> Tensor:
    p = as_tensor(p)
    sqc = math.sqrt(c)
    # re-project points that drifted onto/through the boundary
    norm = p.norm(dim=-1, keepdim=True)
    limit = sqc * (1.0 - 1e-12)
    p = torch.where(norm > limit, p * (limit / norm.clamp_min(limit)), p)
    lam = 1.0 - (p * p).sum(-1, keepdim=True) / c
    return from_spatial(2.0 * p / lam, c)


def mobius_add_ball(x, y, c: float = 1.0) -> Tensor:
    """Gyrovector addition on the ball ``{c|x|^2 < 1}``."""
    x, y = as_tensor(x), as_tensor(y)
    xy = (x * y).sum(-1, keepdim=True)
    x2 = (x * x).sum(-1, keepdim=True)
    y2 = (y * y).sum(-1, keepdim=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c**2 * x2 * y2
    return num / den.clamp_min(1e-15)


def mobius_add(x, y, c: float = CURVATURE) -> Tensor:
    """Möbius addition of two hyperboloid points, routed through the Poincaré ball.

    Algebraically identical to ``poincare_to_lorentz(mobius_add_ball(P(x), P(y)))``
    but every conformal factor ``1 - |p|^2`` is taken from the Lorentz time
    coordinate, so there is no cancellation for points far from the origin.
    """
    x, y = as_tensor(x), as_tensor(y)
    sqc = math.sqrt(c)
    ax = x[..., :1] + sqc
    ay = y[..., :1] + sqc
    p = sqc * x[..., 1:] / ax
    q = sqc * y[..., 1:] / ay
    lam_x = 2.0 * sqc / ax  # 1 - |p|^2 / c
    lam_y = 2.0 * sqc / ay
    pq = (x[..., 1:] * y[..., 1:]).sum(-1, keepdim=True) / (ax * ay)  # <p, q> / c
    qy2 = 1.0 - lam_y
    a = 1.0 + 2.0 * pq + qy2
    space = 2.0 * (a * p + lam_x * q) / (lam_x * lam_y)
    out = from_spatial(space, c)
    if torch.isnan(out).any():
        raise NumericError("mobius_add produced NaN")
    return out


def rotate(p, angles, c: float = CURVATURE) -> Tensor:
    """Block-diagonal Givens rotation of the spatial coordinates, one angle per 2x2 block."""
    p, angles = as_tensor(p), as_tensor(angles)
    space = p[..., 1:]
    m = angles.shape[-1]
    if 2 * m > space.shape[-1]:
        raise DimensionError(f"{m} rotation blocks need at least {2 * m} spatial coordinates")
    pairs = space[..., : 2 * m].reshape(*space.shape[:-1], m, 2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    a, b = pairs[..., 0], pairs[..., 1]
    rot = torch.stack([cos * a - sin * b, sin * a + cos * b], dim=-1)
    rot = rot.reshape(*space.shape[:-1], 2 * m)
    return from_spatial(torch.cat([rot, space[..., 2 * m :]], dim=-1), c)


def lorentz_linear(x, weights, c: float = CURVATURE) -> Tensor:
    """Apply ``weights`` (n_out x n_in) to the spatial part and recompute the time coordinate."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.shape[-1] != x.shape[-1] - 1:
        raise DimensionError(
            f"weights expect {weights.shape[-1]} spatial inputs, point has {x.shape[-1] - 1}"
        )
    return from_spatial(x[..., 1:] @ weights.T, c)
