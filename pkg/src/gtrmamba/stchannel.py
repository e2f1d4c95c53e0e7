"""Euclidean spatio-temporal channel and cross-manifold attention."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DataError, DimensionError, OrderingError
from .geometry import LorentzGeometry

RFF_SCALES = (1.0, 4.0, 16.0, 64.0)
RFF_PER_SCALE = 8
N_FREQ = 8
MAX_GAP_HOURS = 168.0
GAMMA_EPS = 1e-6  # keeps the decay gate strictly inside (0, 1) after float saturation


def sphere_map(lat, lon) -> np.ndarray:
    """Degrees -> unit vector ``(cos lat cos lon, cos lat sin lon, sin lat)``."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180) or not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise DataError("latitude must lie in [-90, 90] and longitude in [-180, 180]")
    phi, lam = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


def _unit_vectors(lat: Tensor, lon: Tensor) -> Tensor:
    if (lat.abs() > 90).any():
        raise DataError("latitude outside [-90, 90]")
    lon = torch.remainder(lon + 180.0, 360.0) - 180.0
    phi, lam = torch.deg2rad(lat), torch.deg2rad(lon)
    return torch.stack([torch.cos(phi) * torch.cos(lam), torch.cos(phi) * torch.sin(lam), torch.sin(phi)], -1)


def arc_distance(u: Tensor, v: Tensor) -> Tensor:
    """Great-circle angle between unit vectors, ``(..., 3) x (K, 3) -> (..., K)``."""
    dot = u @ v.T
    cross = torch.linalg.norm(torch.cross(u.unsqueeze(-2).expand(*u.shape[:-1], v.shape[0], 3),
                                          v.expand(*u.shape[:-1], v.shape[0], 3), dim=-1), dim=-1)
    return torch.atan2(cross, dot)


class GeoEncoder(nn.Module):
    """Gated mix of multi-scale random Fourier features and top-k anchor RBF responses."""

    def __init__(self, d_geo: int = 16, n_anchors: int = 50, top_k: int = 8,
                 scales=RFF_SCALES, per_scale: int = RFF_PER_SCALE, seed: int = 0):
        super().__init__()
        if top_k > n_anchors or top_k < 1:
            raise ConfigError(f"top_k={top_k} must lie in [1, n_anchors={n_anchors}]")
        g = torch.Generator().manual_seed(seed)
        freqs = torch.stack([torch.randn(3, per_scale, generator=g, dtype=torch.float64) * s for s in scales])
        self.register_buffer("freqs", freqs)  # (S, 3, m)
        self.register_buffer("anchors", torch.zeros(n_anchors, 3, dtype=torch.float64))
        self.register_buffer("sigma", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("fitted", torch.tensor(False))
        self.top_k = top_k
        n_rff = 2 * len(scales) * per_scale
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.rff_proj = nn.Linear(n_rff, d_geo)
            self.rbf_proj = nn.Linear(n_anchors, d_geo)
            self.gate = nn.Linear(2 * d_geo, 2)
            self.out = nn.Linear(d_geo, d_geo)
        self.to(torch.float64)

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def fit_anchors(self, lat, lon, seed: int = 0) -> None:
        """K-means anchors on the training check-in unit vectors; width = median pairwise anchor arc."""
        from sklearn.cluster import KMeans

        pts = sphere_map(lat, lon).reshape(-1, 3)
        distinct = np.unique(np.round(pts, 12), axis=0)
        r = self.n_anchors
        if len(distinct) < r:
            raise ConfigError(f"{r} anchors requested but only {len(distinct)} distinct locations")
        centers = KMeans(n_clusters=r, n_init=4, random_state=seed).fit(pts).cluster_centers_
        centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        self.set_anchors(torch.as_tensor(centers))

    def set_anchors(self, anchors: Tensor, sigma: float | None = None) -> None:
        anchors = anchors.to(self.anchors.dtype)
        if anchors.shape != self.anchors.shape:
            raise DimensionError(f"expected anchors of shape {tuple(self.anchors.shape)}")
        anchors = anchors / anchors.norm(dim=1, keepdim=True)
        if sigma is None:
            iu = torch.triu_indices(len(anchors), len(anchors), 1)
            arcs = arc_distance(anchors, anchors)[iu[0], iu[1]]
            sigma = float(arcs.median()) if arcs.numel() else 1.0
            sigma = sigma if sigma > 0 else 1.0
        self.anchors.copy_(anchors)
        self.sigma.fill_(sigma)
        self.fitted.fill_(True)

    def rff_features(self, u: Tensor) -> Tensor:
        proj = torch.einsum("...k,skm->...sm", u, self.freqs).flatten(-2)
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)

    def rbf_features(self, u: Tensor, top_k: int | None = None) -> Tensor:
        k = self.top_k if top_k is None else top_k
        resp = torch.exp(-(arc_distance(u, self.anchors) / self.sigma) ** 2)
        if k >= resp.shape[-1]:
            return resp
        idx = resp.topk(k, dim=-1).indices
        mask = torch.zeros_like(resp).scatter_(-1, idx, 1.0)
        return resp * mask

    def forward(self, lat: Tensor, lon: Tensor) -> Tensor:
        if not bool(self.fitted):
            raise ConfigError("geographic anchors have not been fitted")
        u = _unit_vectors(lat.to(self.freqs.dtype), lon.to(self.freqs.dtype)).to(self.rff_proj.weight.dtype)
        rff = self.rff_proj(self.rff_features(u))
        rbf = self.rbf_proj(self.rbf_features(u))
        w = torch.softmax(self.gate(torch.cat([rff, rbf], dim=-1)), dim=-1)
        return self.out(rff * w[..., :1] + rbf * w[..., 1:])


def calendar_features(timestamps: Tensor) -> tuple[Tensor, Tensor]:
    """Day of week (Monday = 0) and hour of day for UTC-second timestamps."""
    days = torch.div(timestamps, 86400, rounding_mode="floor")
    dow = torch.remainder(days + 3, 7)  # 1970-01-01 was a Thursday
    hour = torch.remainder(torch.div(timestamps, 3600, rounding_mode="floor"), 24)
    return dow, hour


class TimeEncoder(nn.Module):
    """Gap + multi-frequency sinusoid + calendar one-hot features, projected, with a sigmoid decay gate."""

    def __init__(self, d_time: int = 24, n_freq: int = N_FREQ,
                 min_period_h: float = 1.0, max_period_h: float = MAX_GAP_HOURS):
        super().__init__()
        periods = torch.logspace(math.log10(max_period_h), math.log10(min_period_h), n_freq, dtype=torch.float64)
        self.register_buffer("omega", 2 * math.pi / periods)  # increasing
        self.max_gap = max_period_h
        self.proj = nn.Linear(1 + 2 * n_freq + 7 + 24, d_time)
        self.w_gate = nn.Parameter(torch.zeros(d_time))
        self.to(torch.float64)

    def gaps_hours(self, timestamps: Tensor) -> Tensor:
        diff = torch.diff(timestamps, dim=-1)
        if (diff < 0).any():
            raise OrderingError("timestamps must be nondecreasing")
        gaps = torch.cat([torch.zeros_like(timestamps[..., :1]), diff], dim=-1).to(self.omega.dtype) / 3600.0
        return gaps.clamp(0.0, self.max_gap)

    def raw_features(self, timestamps: Tensor, offsets: Tensor | None = None) -> Tensor:
        timestamps = torch.as_tensor(timestamps, dtype=torch.int64)
        dt = self.gaps_hours(timestamps).unsqueeze(-1)
        clock = timestamps if offsets is None else timestamps + 60 * torch.as_tensor(offsets, dtype=torch.int64)
        dow, hour = calendar_features(clock)
        wt = dt * self.omega
        return torch.cat([dt / self.max_gap, torch.sin(wt), torch.cos(wt),
                          F.one_hot(dow, 7).to(dt.dtype), F.one_hot(hour, 24).to(dt.dtype)], dim=-1)

    def forward(self, timestamps: Tensor, offsets: Tensor | None = None) -> tuple[Tensor, Tensor]:
        feats = self.proj(self.raw_features(timestamps, offsets).to(self.proj.weight.dtype))
        gamma = torch.sigmoid(feats @ self.w_gate).clamp(GAMMA_EPS, 1.0 - GAMMA_EPS)
        return feats, gamma


class CrossManifoldAttention(nn.Module):
    """Queries from the semantic tangent vectors, keys/values from the Euclidean context."""

    def __init__(self, d: int, d_ctx: int, heads: int = 4, causal: bool = True, geometry=None):
        super().__init__()
        if d % heads:
            raise ConfigError(f"embedding dim {d} not divisible by {heads} heads")
        self.heads, self.d_head, self.causal = heads, d // heads, causal
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d_ctx, d)
        self.v_proj = nn.Linear(d_ctx, d)
        self.out_proj = nn.Linear(d, d)
        self.geometry = geometry or LorentzGeometry()
        self.to(torch.float64)

    def _split(self, x: Tensor) -> Tensor:
        return x.unflatten(-1, (self.heads, self.d_head)).transpose(-2, -3)  # (..., H, L, dh)

    def attend(self, v_s: Tensor, u_c: Tensor) -> tuple[Tensor, Tensor]:
        if v_s.shape[-2] != u_c.shape[-2]:
            raise DimensionError(f"sequence lengths differ: {v_s.shape[-2]} vs {u_c.shape[-2]}")
        q, k, v = self._split(self.q_proj(v_s)), self._split(self.k_proj(u_c)), self._split(self.v_proj(u_c))
        score = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if self.causal:
            L = score.shape[-1]
            future = torch.ones(L, L, dtype=torch.bool, device=score.device).triu(1)
            score = score.masked_fill(future, float("-inf"))
        weights = torch.softmax(score, dim=-1)
        out = (weights @ v).transpose(-2, -3).flatten(-2)
        return out, weights

    def forward(self, v_s: Tensor, u_c: Tensor) -> Tensor:
        out, _ = self.attend(v_s, u_c)
        g = self.geometry
        return g.add(g.expmap0(v_s), g.expmap0(self.out_proj(out)))
