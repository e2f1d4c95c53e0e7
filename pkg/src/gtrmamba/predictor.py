"""Dual-pathway scoring, multi-task loss and ranking metrics."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DataError, DimensionError
from .geometry import LorentzGeometry

TASKS = ("poi", "cat", "reg")
COINCIDENT_SQ = 1e-12  # squared distances below this are treated as exact coincidence


def score_hyperbolic(e: Tensor, candidates: Tensor, tau, geometry=None) -> Tensor:
    """``-sqrt(d^2(e, p)) / tau`` for every candidate row ``p``."""
    tau = torch.as_tensor(tau, dtype=e.dtype)
    if (tau <= 0).any():
        raise ConfigError("temperature must be positive")
    g = geometry or LorentzGeometry()
    d2 = g.pairwise_sq_dist(e, candidates)
    near = d2 <= COINCIDENT_SQ
    dist = torch.sqrt(torch.where(near, torch.ones_like(d2), d2))
    return -torch.where(near, torch.zeros_like(d2), dist) / tau


def score_tangent(e: Tensor, decoder: nn.Linear, geometry=None) -> Tensor:
    g = geometry or LorentzGeometry()
    return decoder(g.logmap0(e))


def mix_scores(s_tan: Tensor, s_hyp: Tensor, alpha) -> Tensor:
    if s_tan.shape != s_hyp.shape:
        raise DimensionError(f"score shapes differ: {tuple(s_tan.shape)} vs {tuple(s_hyp.shape)}")
    return alpha * s_tan + (1 - alpha) * s_hyp


def multitask_loss(scores: Mapping[str, Tensor], labels: Mapping[str, Tensor],
                   weights: Mapping[str, float] | None = None) -> Tensor:
    """Sum over tasks of the mean softmax cross-entropy (rows of ``scores`` are queries)."""
    total = 0.0
    for task, s in scores.items():
        y = labels[task]
        if y.numel() and (y.min() < 0 or y.max() >= s.shape[-1]):
            raise DataError(f"{task} label out of range [0, {s.shape[-1]})")
        w = 1.0 if weights is None else weights.get(task, 1.0)
        total = total + w * F.cross_entropy(s, y)
    return total


class PredictionHead(nn.Module):
    def __init__(self, d: int, n_candidates: Mapping[str, int], geometry=None):
        super().__init__()
        self.geometry = geometry or LorentzGeometry()
        self.log_tau = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.alpha_raw = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.decoders = nn.ModuleDict({t: nn.Linear(d, n_candidates[t]) for t in TASKS})
        self.to(torch.float64)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    @property
    def alpha(self) -> Tensor:
        return torch.sigmoid(self.alpha_raw)

    def forward(self, e: Tensor, candidates: Mapping[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for t in TASKS:
            s_hyp = score_hyperbolic(e, candidates[t], self.tau, self.geometry)
            s_tan = score_tangent(e, self.decoders[t], self.geometry)
            out[t] = mix_scores(s_tan, s_hyp, self.alpha)
        return out


def ranks_of(scores, labels) -> np.ndarray:
    """1-based rank of each label; ties go to the lower candidate index."""
    s = torch.as_tensor(scores)
    y = torch.as_tensor(labels, dtype=torch.long)
    true = s.gather(-1, y.unsqueeze(-1))
    idx = torch.arange(s.shape[-1])
    ahead = (s > true) | ((s == true) & (idx < y.unsqueeze(-1)))
    return (ahead.sum(-1) + 1).numpy()


def rank_metrics(ranks: Sequence[int], ks=(1, 5, 10)) -> dict[str, float]:
    """NDCG@k, ACC@k and MRR for a single relevant item per query."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise DataError("no queries to evaluate")
    if np.any(r < 1):
        raise DataError("ranks are 1-based")
    out = {}
    for k in ks:
        hit = r <= k
        out[f"NDCG@{k}"] = float(np.mean(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0)))
        out[f"ACC@{k}"] = float(np.mean(hit))
    out["MRR"] = float(np.mean(1.0 / r))
    return out
