"""End-to-end training, evaluation and checkpointing for :class:`~gtrmamba.model.GTRMamba`."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import ConfigError, DataError, StorageError, TrainingError
from ..model import GTRMamba, ModelConfig, canonical_ablation, collate
from ..predictor import rank_metrics, ranks_of
from .optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EPOCH_SEED_STRIDE = 1_000_003


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    clip_norm: float = 5.0
    ablations: tuple = ()
    task_weights: dict | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 0 or self.clip_norm <= 0:
            raise ConfigError("batch_size, lr and clip_norm must be positive and epochs nonnegative")
        self.ablations = tuple(sorted({canonical_ablation(a) for a in self.ablations}))


@dataclass
class TrainState:
    """Everything needed to continue training or to report on it."""
    model: GTRMamba
    optimizer: Adam
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = 0
    best_score: float = -math.inf


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    gen = torch.Generator().manual_seed(seed * EPOCH_SEED_STRIDE + epoch)
    order = torch.randperm(n, generator=gen).tolist()
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@torch.no_grad()
def predict_ranks(model: GTRMamba, trajs: Sequence, batch_size: int = 256, all_steps: bool = False,
                  task: str = "poi") -> np.ndarray:
    """Rank of the true next item. By default only the final step of each trajectory is scored."""
    if not trajs:
        raise DataError("no trajectories to evaluate")
    model.eval()
    out = []
    for i in range(0, len(trajs), batch_size):
        batch = collate(trajs[i:i + batch_size], model.config.use_local_time)
        scores = model(batch)[task]
        y = batch[{"poi": "y_poi", "cat": "y_cat", "reg": "y_reg"}[task]]
        if all_steps:
            m = batch["mask"]
            out.append(ranks_of(scores[m], y[m]))
        else:
            rows = torch.arange(len(batch["last"]))
            out.append(ranks_of(scores[rows, batch["last"]], y[rows, batch["last"]]))
    model.train()
    return np.concatenate(out)


def evaluate(model: GTRMamba, trajs: Sequence, batch_size: int = 256, all_steps: bool = False) -> dict[str, float]:
    return rank_metrics(predict_ranks(model, trajs, batch_size, all_steps))


def make_optimizer(model: GTRMamba, config: TrainConfig) -> Adam:
    return Adam(model.named_parameters(), lr=config.lr, clip_norm=config.clip_norm)


def train(model: GTRMamba, train_trajs: Sequence, val_trajs: Sequence | None = None,
          config: TrainConfig = TrainConfig(), state: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Run epochs ``state.epoch .. config.epochs - 1``; pass ``state`` to resume.

    Model selection keeps the parameters with the best validation MRR (training
    loss stands in when there is no validation split).
    """
    if not train_trajs:
        raise DataError("empty training split")
    if set(config.ablations) != set(model.config.ablations):
        raise ConfigError(f"train ablations {config.ablations} differ from model ablations {model.config.ablations}")
    if state is None:
        state = TrainState(model, make_optimizer(model, config))
        state.best_state = _snapshot(model)
    opt = state.optimizer
    model.train()
    for epoch in range(state.epoch, config.epochs):
        losses, weights = [], []
        for b, idx in enumerate(_batches(len(train_trajs), config.batch_size, config.seed, epoch)):
            batch = collate([train_trajs[i] for i in idx], model.config.use_local_time)
            opt.zero_grad()
            loss = model.loss(batch, config.task_weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}, batch {b}")
            loss.backward()
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(loss.item())
            weights.append(int(batch["mask"].sum()))
        row = {"epoch": epoch + 1, "train_loss": float(np.average(losses, weights=weights)),
               "ablation": "+".join(config.ablations) or "none"}
        if val_trajs:
            row.update({f"val_{k}": v for k, v in evaluate(model, val_trajs).items()})
            score = row["val_MRR"]
        else:
            score = -row["train_loss"]
        if score > state.best_score:
            state.best_score, state.best_epoch, state.best_state = score, epoch + 1, _snapshot(model)
        state.history.append(row)
        state.epoch = epoch + 1
        log.info("epoch %d loss %.5f", epoch + 1, row["train_loss"])
        if on_epoch:
            on_epoch(row)
    return state


def _snapshot(model: GTRMamba) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def save_checkpoint(path, state: TrainState, train_config: TrainConfig, vocab: dict | None = None) -> None:
    model = state.model
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config_dict(),
        "train_config": {**asdict(train_config), "ablations": list(train_config.ablations)},
        "sizes": model.sizes,
        "seed": train_config.seed,
        "vocab": vocab,
        "model_state": model.state_dict(),
        "best_state": state.best_state,
        "best_epoch": state.best_epoch,
        "best_score": state.best_score,
        "optimizer_state": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "history": state.history,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, use_best: bool = False) -> tuple[TrainState, TrainConfig, dict]:
    """Rebuild model, optimizer and history. Returns ``(state, train_config, raw_payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, EOFError, RuntimeError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StorageError(f"unsupported checkpoint version {payload.get('version')!r}")
    mcfg = payload["model_config"]
    model = GTRMamba(ModelConfig(**{**mcfg, "fusion": tuple(mcfg["fusion"]),
                                    "ablations": tuple(mcfg["ablations"])}), payload["sizes"])
    model.load_state_dict(payload["best_state"] if use_best else payload["model_state"])
    tcfg = TrainConfig(**payload["train_config"])
    opt = make_optimizer(model, tcfg)
    opt.load_state_dict(payload["optimizer_state"])
    state = TrainState(model, opt, payload["epoch"], list(payload["history"]), payload["best_state"],
                       payload["best_epoch"], payload["best_score"])
    return state, tcfg, payload
