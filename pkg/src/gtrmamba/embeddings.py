"""Relation graph, rotation-aligned contrastive pretraining and semantic fusion."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import manifold as M
from .errors import ConfigError, DataError, OrderingError, StorageError, TrainingError

log = logging.getLogger(__name__)

KINDS = ("user", "poi", "category", "region")
EDGE_TYPES = ("up", "pp", "cc", "rr")
EDGE_KINDS = {"up": ("user", "poi"), "pp": ("poi", "poi"),
              "cc": ("category", "category"), "rr": ("region", "region")}
INIT_STD = 0.02


@dataclass
class EdgeSet:
    edge_type: str
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray  # multiplicity of each (src, dst) pair

    def __len__(self):
        return len(self.src)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


@dataclass(frozen=True)
class FusionWeights:
    alpha_u: float = 0.5
    alpha_p: float = 0.3
    alpha_c: float = 0.1
    alpha_r: float = 0.1

    def __post_init__(self):
        for v in (self.alpha_u, self.alpha_p, self.alpha_c, self.alpha_r):
            if not math.isfinite(v) or v < 0:
                raise ConfigError("fusion weights must be finite and nonnegative")


def _edge_set(edge_type: str, counts: Counter) -> EdgeSet:
    items = sorted(counts.items())
    src = np.array([k[0] for k, _ in items], dtype=np.int64)
    dst = np.array([k[1] for k, _ in items], dtype=np.int64)
    w = np.array([v for _, v in items], dtype=np.int64)
    return EdgeSet(edge_type, src, dst, w)


def build_edges(trajectories: Sequence, window_hours: float = 6.0) -> dict[str, EdgeSet]:
    """User-POI visit edges, POI-POI transitions within ``window_hours``, and the
    category/region transitions those POI transitions induce."""
    visits: dict[int, list[tuple[int, int, int, int]]] = defaultdict(list)
    for t in trajectories:
        if np.any(np.diff(t.timestamps) < 0):
            raise OrderingError(f"trajectory of user {t.user} is not time-sorted")
        visits[t.user] += list(zip(t.timestamps.tolist(), t.pois.tolist(), t.cats.tolist(), t.regions.tolist()))

    up, pp, cc, rr = Counter(), Counter(), Counter(), Counter()
    limit = window_hours * 3600
    for u, rows in visits.items():
        rows.sort(key=lambda r: r[0])  # stable: keeps within-trajectory order on ties
        for _, p, _, _ in rows:
            up[(u, p)] += 1
        for a, b in zip(rows, rows[1:]):
            if b[0] - a[0] <= limit:
                pp[(a[1], b[1])] += 1
                cc[(a[2], b[2])] += 1
                rr[(a[3], b[3])] += 1
    return {t: _edge_set(t, c) for t, c in zip(EDGE_TYPES, (up, pp, cc, rr))}


class EntityTables(nn.Module):
    """Tangent-parameterised hyperbolic tables (one per entity kind) with per-entity biases."""

    def __init__(self, sizes: Mapping[str, int], dim: int, seed: int = 0, std: float = INIT_STD,
                 c: float = M.CURVATURE):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.dim, self.c = dim, c
        self.sizes = {k: int(sizes[k]) for k in KINDS}
        self.vectors = nn.ParameterDict({
            k: nn.Parameter(torch.randn(self.sizes[k], dim, generator=g, dtype=torch.float64) * std)
            for k in KINDS})
        self.biases = nn.ParameterDict({
            k: nn.Parameter(torch.zeros(self.sizes[k], dtype=torch.float64)) for k in KINDS})

    def points(self, kind: str) -> Tensor:
        return M.exp_o(self.vectors[kind], self.c)


class Rotations(nn.Module):
    """One set of block rotation angles per edge type."""

    def __init__(self, dim: int):
        super().__init__()
        self.angles = nn.ParameterDict({
            t: nn.Parameter(torch.zeros(dim // 2, dtype=torch.float64)) for t in EDGE_TYPES})


def score_edge(src: Tensor, dst: Tensor, angles: Tensor, b_src, b_dst, c: float = M.CURVATURE) -> Tensor:
    """Negative clamped squared distance between the rotated source and the target, plus both biases."""
    d2 = M.sq_lorentz_dist(M.rotate(src, angles, c), dst, c, check=False)
    return -d2.clamp_min(0.0) + b_src + b_dst


def edge_loss(pos: Tensor, neg: Tensor, weight: Tensor | None = None) -> Tensor:
    """``-(sum log sigma(pos) + sum log sigma(-neg))``; ``neg`` is (E, K), weights scale rows."""
    per_edge = F.logsigmoid(pos) + F.logsigmoid(-neg).reshape(len(pos), -1).sum(-1)
    if weight is not None:
        per_edge = per_edge * weight
    return -per_edge.sum()


def sample_negatives(dst: Tensor, n_entities: int, k: int, generator: torch.Generator) -> Tensor:
    """Uniform draws over ``range(n_entities)`` excluding each row's true target."""
    if n_entities < 2:
        raise ConfigError("negative sampling needs at least two candidate entities")
    draw = torch.randint(0, n_entities - 1, (len(dst), k), generator=generator)
    return draw + (draw >= dst.unsqueeze(-1)).long()


def contrastive_loss(edges: Mapping[str, EdgeSet], tables: EntityTables, rotations: Rotations,
                     negatives_per_edge: int = 5, generator: torch.Generator | None = None,
                     subset: Mapping[str, np.ndarray] | None = None) -> Tensor:
    """Edge-contrastive loss summed over all edge types (``subset`` selects edge rows per type)."""
    if negatives_per_edge < 1:
        raise ConfigError("negatives_per_edge must be >= 1")
    generator = generator or torch.Generator().manual_seed(0)
    total = torch.zeros((), dtype=torch.float64)
    for t, es in edges.items():
        rows = np.arange(len(es)) if subset is None else subset[t]
        if len(rows) == 0:
            continue
        sk, dk = EDGE_KINDS[t]
        src = torch.as_tensor(es.src[rows])
        dst = torch.as_tensor(es.dst[rows])
        w = torch.as_tensor(es.weight[rows], dtype=torch.float64)
        neg = sample_negatives(dst, tables.sizes[dk], negatives_per_edge, generator)
        src_pts = M.exp_o(tables.vectors[sk][src], tables.c)
        dst_pts = M.exp_o(tables.vectors[dk][dst], tables.c)
        neg_pts = M.exp_o(tables.vectors[dk][neg], tables.c)
        b_src = tables.biases[sk][src]
        ang = rotations.angles[t]
        pos = score_edge(src_pts, dst_pts, ang, b_src, tables.biases[dk][dst], tables.c)
        negs = score_edge(src_pts.unsqueeze(1), neg_pts, ang, b_src.unsqueeze(1), tables.biases[dk][neg], tables.c)
        total = total + edge_loss(pos, negs, w)
    return total


@dataclass
class PretrainConfig:
    dim: int = 64
    epochs: int = 50
    lr: float = 0.01
    negatives: int = 5
    batch_edges: int = 4096
    window_hours: float = 6.0
    seed: int = 0
    init_std: float = INIT_STD


def pretrain(trajectories: Sequence, sizes: Mapping[str, int], config: PretrainConfig = PretrainConfig(),
             edges: Mapping[str, EdgeSet] | None = None):
    """Fit entity tables and rotations by Adam on the contrastive edge loss.

    Returns ``(tables, rotations, history)`` where ``history`` holds the mean
    loss per edge batch for each epoch.
    """
    from .engine.optim import Adam

    edges = build_edges(trajectories, config.window_hours) if edges is None else edges
    tables = EntityTables(sizes, config.dim, seed=config.seed, std=config.init_std)
    rotations = Rotations(config.dim)
    params = {f"tables.{k}": v for k, v in tables.named_parameters()}
    params.update({f"rotations.{k}": v for k, v in rotations.named_parameters()})
    opt = Adam(params, lr=config.lr, clip_norm=None)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    n_total = sum(len(e) for e in edges.values())
    n_batches = max(1, math.ceil(n_total / config.batch_edges))
    history: list[float] = []
    for epoch in range(config.epochs):
        chunks = {t: np.array_split(rng.permutation(len(es)), n_batches) for t, es in edges.items()}
        losses = []
        for b in range(n_batches):
            loss = contrastive_loss(edges, tables, rotations, config.negatives, gen,
                                    subset={t: chunks[t][b] for t in edges})
            if not torch.isfinite(loss):
                raise TrainingError(f"pretraining loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d loss %.6f", epoch, history[-1])
    return tables, rotations, history


def fuse_semantics(users: Tensor, pois: Tensor, cats: Tensor, regions: Tensor, tables: EntityTables,
                   w: FusionWeights = FusionWeights(), geometry=None) -> Tensor:
    """Weighted sum of the log-mapped user/POI/category/region embeddings, one tangent vector per step.

    ``users`` may be one index per sequence (broadcast over steps) or per step.
    """
    for kind, idx in (("user", users), ("poi", pois), ("category", cats), ("region", regions)):
        if idx.numel() and (idx.min() < 0 or idx.max() >= tables.sizes[kind]):
            raise DataError(f"unknown {kind} index")
    if geometry is None:
        lift = lambda kind, idx: M.log_o(M.exp_o(tables.vectors[kind][idx], tables.c), tables.c, check=False)
    else:
        lift = lambda kind, idx: geometry.logmap0(geometry.expmap0(tables.vectors[kind][idx]))
    u = lift("user", users)
    if u.dim() < pois.dim() + 1:
        u = u.unsqueeze(-2)
    return (w.alpha_u * u + w.alpha_p * lift("poi", pois)
            + w.alpha_c * lift("category", cats) + w.alpha_r * lift("region", regions))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------
# tables.csv layout:
#   "#table",kind,count,n,c      then `count` rows: index,v_1..v_n,bias
#   "#rotation",edge_type,m      then one row: theta_1..theta_m

def save_tables(prefix, tables: EntityTables, rotations: Rotations) -> None:
    arrays = {f"vec_{k}": tables.vectors[k].detach().numpy() for k in KINDS}
    arrays.update({f"bias_{k}": tables.biases[k].detach().numpy() for k in KINDS})
    arrays.update({f"rot_{t}": rotations.angles[t].detach().numpy() for t in EDGE_TYPES})
    arrays["meta"] = np.array([tables.dim, tables.c])
    np.savez(f"{prefix}.npz", **arrays)
    with open(f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for k in KINDS:
            vec, bias = arrays[f"vec_{k}"], arrays[f"bias_{k}"]
            w.writerow(["#table", k, len(vec), tables.dim, repr(tables.c)])
            for i, (row, b) in enumerate(zip(vec, bias)):
                w.writerow([i, *map(repr, row.tolist()), repr(float(b))])
        for t in EDGE_TYPES:
            ang = arrays[f"rot_{t}"]
            w.writerow(["#rotation", t, len(ang)])
            w.writerow(list(map(repr, ang.tolist())))


def load_tables(path) -> tuple[EntityTables, Rotations]:
    """Read tables from the ``.npz`` container or the ``.csv`` text form."""
    path = str(path)
    try:
        if path.endswith(".csv"):
            arrays = _read_tables_csv(path)
        else:
            with np.load(path) as z:
                arrays = {k: z[k] for k in z.files}
    except OSError as exc:
        raise StorageError(f"cannot read tables {path}: {exc}") from exc
    dim, c = int(arrays["meta"][0]), float(arrays["meta"][1])
    tables = EntityTables({k: len(arrays[f"vec_{k}"]) for k in KINDS}, dim, c=c)
    rotations = Rotations(dim)
    with torch.no_grad():
        for k in KINDS:
            tables.vectors[k].copy_(torch.as_tensor(arrays[f"vec_{k}"]))
            tables.biases[k].copy_(torch.as_tensor(arrays[f"bias_{k}"]))
        for t in EDGE_TYPES:
            rotations.angles[t].copy_(torch.as_tensor(arrays[f"rot_{t}"]))
    return tables, rotations


def _read_tables_csv(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    i, dim, c = 0, 0, 1.0
    while i < len(rows):
        head = rows[i]
        if head[0] == "#table":
            kind, count, dim, c = head[1], int(head[2]), int(head[3]), float(head[4])
            body = np.array([[float(x) for x in r[1:]] for r in rows[i + 1:i + 1 + count]]).reshape(count, dim + 1)
            arrays[f"vec_{kind}"], arrays[f"bias_{kind}"] = body[:, :dim], body[:, dim]
            i += 1 + count
        elif head[0] == "#rotation":
            arrays[f"rot_{head[1]}"] = np.array([float(x) for x in rows[i + 1]]) if int(head[2]) else np.zeros(0)
            i += 2
        else:
            raise DataError(f"{path}: unexpected row {i + 1}")
    arrays["meta"] = np.array([dim, c])
    return arrays
