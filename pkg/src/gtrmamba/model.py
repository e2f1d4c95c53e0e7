"""End-to-end next-POI model: semantic fusion -> cross-manifold attention -> GTR layers -> dual-pathway head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .embeddings import EntityTables, FusionWeights, fuse_semantics
from .errors import ConfigError, DataError
from .geometry import make_geometry
from .gtr_ssm import GTRLayer, stack
from .predictor import PredictionHead, multitask_loss
from .stchannel import CrossManifoldAttention, GeoEncoder, TimeEncoder

ABLATIONS = ("ssm", "pretrained-init", "hyperbolic-mode", "st-channel", "attention", "context-drive")
_ALIASES = {
    "w/o ssm": "ssm", "w/o he": "pretrained-init", "he": "pretrained-init",
    "w/o hb": "hyperbolic-mode", "hb": "hyperbolic-mode", "w/o stc": "st-channel", "stc": "st-channel",
    "w/o att": "attention", "att": "attention", "w/o u_c": "context-drive", "u_c": "context-drive",
    "uc": "context-drive",
}


def canonical_ablation(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    return key


@dataclass
class ModelConfig:
    d: int = 64
    d_geo: int = 16
    d_time: int = 24
    heads: int = 4
    layers: int = 2
    n_anchors: int = 50
    top_k: int = 8
    c: float = 1.0
    fusion: tuple = (0.5, 0.3, 0.1, 0.1)
    causal: bool = True
    use_local_time: bool = False
    seed: int = 0
    ablations: tuple = ()

    def __post_init__(self):
        self.ablations = tuple(sorted({canonical_ablation(a) for a in self.ablations}))
        self.fusion = tuple(float(x) for x in self.fusion)
        for k in ("d", "d_geo", "d_time", "heads", "layers", "n_anchors", "top_k"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")

    def ablated(self, name: str) -> bool:
        return name in self.ablations


def collate(trajs: Sequence, use_local_time: bool = False) -> dict[str, Tensor]:
    """Right-padded batch. Inputs are steps ``0..L-2``; targets are steps ``1..L-1``."""
    if not trajs:
        raise DataError("empty batch")
    L = max(len(t) for t in trajs) - 1
    B = len(trajs)
    out = {k: np.zeros((B, L), dtype=np.int64) for k in
           ("pois", "cats", "regions", "ts", "offsets", "y_poi", "y_cat", "y_reg")}
    lat = np.zeros((B, L))
    lon = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    for b, t in enumerate(trajs):
        n = len(t) - 1
        pad = lambda a: np.concatenate([a, np.repeat(a[-1:], L - len(a))])
        out["pois"][b], out["cats"][b], out["regions"][b] = pad(t.pois[:-1]), pad(t.cats[:-1]), pad(t.regions[:-1])
        out["ts"][b] = pad(t.timestamps[:-1])
        out["offsets"][b] = pad(t.offsets[:-1]) if use_local_time else 0
        lat[b], lon[b] = pad(t.lats[:-1]), pad(t.lons[:-1])
        out["y_poi"][b], out["y_cat"][b], out["y_reg"][b] = pad(t.pois[1:]), pad(t.cats[1:]), pad(t.regions[1:])
        mask[b, :n] = True
    batch = {k: torch.as_tensor(v) for k, v in out.items()}
    batch.update(user=torch.as_tensor([t.user for t in trajs]), lat=torch.as_tensor(lat),
                 lon=torch.as_tensor(lon), mask=torch.as_tensor(mask),
                 last=torch.as_tensor([len(t) - 2 for t in trajs]))
    return batch


class GTRMamba(nn.Module):
    def __init__(self, config: ModelConfig, sizes: dict[str, int]):
        super().__init__()
        self.config = config
        self.sizes = dict(sizes)
        cfg = config
        self.geometry = make_geometry(not cfg.ablated("hyperbolic-mode"), cfg.c)
        d_ctx = cfg.d_geo + cfg.d_time
        self.fusion = FusionWeights(*cfg.fusion)
        self.tables = EntityTables(sizes, cfg.d, seed=cfg.seed, c=cfg.c)
        self.geo = GeoEncoder(cfg.d_geo, cfg.n_anchors, cfg.top_k, seed=cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.time = TimeEncoder(cfg.d_time)
            self.attn = CrossManifoldAttention(cfg.d, d_ctx, cfg.heads, cfg.causal, self.geometry)
            self.head = PredictionHead(cfg.d, {"poi": sizes["poi"], "cat": sizes["category"],
                                               "reg": sizes["region"]}, self.geometry)
        self.layers = nn.ModuleList(GTRLayer(cfg.d, d_ctx, self.geometry, seed=cfg.seed + 1 + i)
                                    for i in range(cfg.layers))

    def load_tables(self, tables: EntityTables) -> None:
        if tables.sizes != self.tables.sizes or tables.dim != self.tables.dim:
            raise ConfigError(f"pretrained tables {tables.sizes} x {tables.dim} do not match the model "
                              f"{self.tables.sizes} x {self.tables.dim}")
        with torch.no_grad():
            for k in tables.vectors:
                self.tables.vectors[k].copy_(tables.vectors[k])
                self.tables.biases[k].copy_(tables.biases[k])

    def context(self, batch) -> tuple[Tensor, Tensor]:
        cfg = self.config
        B, L = batch["pois"].shape
        if cfg.ablated("st-channel"):
            return (torch.zeros(B, L, cfg.d_geo + cfg.d_time, dtype=torch.float64),
                    torch.ones(B, L, dtype=torch.float64))
        e_g = self.geo(batch["lat"], batch["lon"])
        e_t, gamma = self.time(batch["ts"], batch["offsets"])
        return torch.cat([e_g, e_t], dim=-1), gamma

    def forward(self, batch, return_aux: bool = False):
        cfg, g = self.config, self.geometry
        v_s = fuse_semantics(batch["user"], batch["pois"], batch["cats"], batch["regions"],
                             self.tables, self.fusion, g)
        u_c, gamma = self.context(batch)
        q = g.expmap0(v_s) if cfg.ablated("attention") else self.attn(v_s, u_c)
        ssm_ctx, ssm_gamma = u_c, gamma
        if cfg.ablated("context-drive"):
            ssm_ctx, ssm_gamma = torch.zeros_like(u_c), torch.ones_like(gamma)
        aux = []
        if cfg.ablated("ssm"):
            E = q
        else:
            E, aux = stack(self.layers, q, ssm_ctx, ssm_gamma, return_aux=True)
        candidates = {"poi": g.expmap0(self.tables.vectors["poi"]),
                      "cat": g.expmap0(self.tables.vectors["category"]),
                      "reg": g.expmap0(self.tables.vectors["region"])}
        scores = self.head(E, candidates)
        if return_aux:
            return scores, {"E": E, "q": q, "gamma": gamma, "layers": aux}
        return scores

    def loss(self, batch, task_weights=None) -> Tensor:
        """Teacher-forced multi-task loss over every valid step."""
        scores = self(batch)
        m = batch["mask"]
        flat = {t: s[m] for t, s in scores.items()}
        labels = {"poi": batch["y_poi"][m], "cat": batch["y_cat"][m], "reg": batch["y_reg"][m]}
        return multitask_loss(flat, labels, task_weights)

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["fusion"] = list(d["fusion"])
        d["ablations"] = list(d["ablations"])
        return d
