"""``gtrmamba`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import statistics
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, GTRError, StorageError

log = logging.getLogger("gtrmamba")

SPLITS = ("train", "val", "test")
METRIC_ORDER = ("NDCG@1", "NDCG@5", "NDCG@10", "MRR", "ACC@1", "ACC@5", "ACC@10")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _split_by_user(trajs) -> dict[str, list]:
    by_user: dict[int, list] = {}
    for t in trajs:
        by_user.setdefault(t.user, []).append(t)
    splits = {s: [] for s in SPLITS}
    for u in sorted(by_user):
        ts = sorted(by_user[u], key=lambda t: int(t.timestamps[0]))
        cut1, cut2 = dataio._split_counts(len(ts))
        splits["train"] += ts[:cut1]
        splits["val"] += ts[cut1:cut2]
        splits["test"] += ts[cut2:]
    return splits


def load_splits(cfg: RunConfig) -> tuple[dict[str, list], dict[str, int], dataio.Vocab | None]:
    """Trajectory splits, entity counts and (for real data) the vocabulary."""
    from . import synthetic

    kind = cfg.data.synthetic
    if kind == "tree":
        trajs, sizes = synthetic.tree_corpus(seed=cfg.seed)
        return _split_by_user(trajs), sizes, None
    if kind == "switching":
        trajs, _, sizes = synthetic.switching_corpus(seed=cfg.seed)
        return _split_by_user(trajs), sizes, None
    if kind == "loop":
        t = synthetic.loop_trajectory()
        return {s: [t] for s in SPLITS}, {"user": 1, "poi": 5, "category": 2, "region": 2}, None
    root = Path(cfg.data.manifests or cfg.out)
    vocab = dataio.load_vocab(root / "vocab.json")
    splits = {s: dataio.read_manifest(root / f"{s}.tsv", vocab) for s in SPLITS}
    return splits, vocab.sizes, vocab


def _write_rows(path: Path, header, rows) -> None:
    try:
        dataio.write_csv(path, header, rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.eval.checkpoint or Path(cfg.out) / "checkpoint.pt")


def _tables_path(cfg: RunConfig) -> Path:
    return Path(cfg.pretrain.tables or Path(cfg.out) / "tables.npz")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> dict:
    d = cfg.data
    if not d.path:
        raise ConfigError("data.path is required for ingest")
    if not Path(d.path).is_file():
        raise StorageError(f"input file {d.path} does not exist")
    checkins, report = dataio.ingest(d.path, d.columns, d.delimiter, d.header, d.time_format,
                                     d.encoding, d.max_malformed_frac)
    vocab, kept = dataio.filter_and_index(checkins, d.min_poi_checkins)
    vocab.poi_region = dataio.partition_regions(vocab.poi_lat, vocab.poi_lon, d.regions, cfg.seed)
    vocab.n_regions = d.regions
    splits, seg = dataio.segment_and_split(kept, vocab, d.gap_hours, max_len=d.max_len)
    stats = {
        "rows": report.rows, "parsed": report.parsed, "malformed": report.malformed,
        "checkins_kept": len(kept), "users": len(vocab.users), "pois": len(vocab.pois),
        "categories": len(vocab.categories), "regions": vocab.n_regions,
        "segments": seg.segments, "dropped_short_segments": seg.dropped_short,
        "dropped_users": seg.dropped_users, **{f"{s}_trajectories": len(splits[s]) for s in SPLITS},
    }
    out = _out(cfg)
    # stage everything next to the destination and only move files once all are written
    stage = Path(tempfile.mkdtemp(prefix=".ingest-", dir=out))
    try:
        for s in SPLITS:
            dataio.write_manifest(stage / f"{s}.tsv", splits[s])
        dataio.save_vocab(stage / "vocab.json", vocab)
        dataio.write_csv(stage / "ingest_stats.csv", ("key", "value"), stats.items())
        for f in sorted(stage.iterdir()):
            os.replace(f, out / f.name)
    except OSError as exc:
        raise StorageError(f"cannot write ingest outputs to {out}: {exc}") from exc
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return stats


def cmd_pretrain(cfg: RunConfig) -> dict:
    from .embeddings import PretrainConfig, pretrain, save_tables

    splits, sizes, _ = load_splits(cfg)
    p = cfg.pretrain
    pc = PretrainConfig(dim=cfg.model.d, epochs=p.epochs, lr=p.lr, negatives=p.negatives,
                        batch_edges=p.batch_edges, window_hours=p.window_hours, seed=cfg.seed,
                        init_std=p.init_std)
    tables, rotations, history = pretrain(splits["train"], sizes, pc)
    out = _out(cfg)
    try:
        save_tables(out / "tables", tables, rotations)
    except OSError as exc:
        raise StorageError(f"cannot write tables to {out}: {exc}") from exc
    _write_rows(out / "pretrain_history.csv", ("epoch", "loss"), ((i + 1, v) for i, v in enumerate(history)))
    return {"epochs": len(history), "final_loss": history[-1] if history else float("nan")}


def build_model(cfg: RunConfig, sizes, train_trajs):
    from .model import GTRMamba, ModelConfig

    m = cfg.model
    model = GTRMamba(ModelConfig(d=m.d, d_geo=m.d_geo, d_time=m.d_time, heads=m.heads, layers=m.layers,
                                 n_anchors=m.n_anchors, top_k=m.top_k, c=m.c, fusion=tuple(m.fusion),
                                 causal=m.causal, use_local_time=m.use_local_time, seed=cfg.seed,
                                 ablations=tuple(cfg.ablations)), sizes)
    lat = np.concatenate([t.lats for t in train_trajs])
    lon = np.concatenate([t.lons for t in train_trajs])
    model.geo.fit_anchors(lat, lon, seed=cfg.seed)
    if not model.config.ablated("pretrained-init"):
        from .embeddings import load_tables

        path = _tables_path(cfg)
        if not path.exists():
            raise ConfigError(f"pretrained tables {path} not found; run pretrain first or ablate pretrained-init")
        tables, _ = load_tables(path)
        model.load_tables(tables)
    return model


def _train_config(cfg: RunConfig):
    from .engine.train import TrainConfig

    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, lr=t.lr, epochs=t.epochs, seed=cfg.seed, clip_norm=t.clip_norm,
                       ablations=tuple(cfg.ablations), task_weights=t.task_weights or None)


def cmd_train(cfg: RunConfig) -> dict:
    from .engine.train import load_checkpoint, save_checkpoint, train

    splits, sizes, vocab = load_splits(cfg)
    tcfg = _train_config(cfg)
    if cfg.train.resume:
        state, old, _ = load_checkpoint(cfg.train.resume)
        if set(old.ablations) != set(tcfg.ablations):
            raise ConfigError("resumed checkpoint was trained with different ablations")
        model = state.model
    else:
        model, state = build_model(cfg, sizes, splits["train"]), None
    state = train(model, splits["train"], splits["val"], tcfg, state)
    out = _out(cfg)
    save_checkpoint(out / "checkpoint.pt", state, tcfg, None if vocab is None else vocab.to_json())
    keys = sorted({k for row in state.history for k in row}, key=lambda k: (k != "epoch", k != "train_loss", k))
    _write_rows(out / "history.csv", keys, ([row.get(k, "") for k in keys] for row in state.history))
    return {"epochs": state.epoch, "best_epoch": state.best_epoch,
            "final_loss": state.history[-1]["train_loss"] if state.history else float("nan")}


def cmd_eval(cfg: RunConfig) -> dict:
    from .engine.train import evaluate, load_checkpoint

    state, _, _ = load_checkpoint(_checkpoint_path(cfg), use_best=cfg.eval.use_best)
    splits, _, _ = load_splits(cfg)
    trajs = splits[cfg.eval.split]
    if not trajs:
        raise DataError(f"split {cfg.eval.split!r} is empty")
    metrics = evaluate(state.model, trajs)
    _write_rows(_out(cfg) / f"eval_{cfg.eval.split}.csv", ("metric", "value"),
                ((k, metrics[k]) for k in METRIC_ORDER))
    return metrics


@torch.no_grad()
def scene_analysis(model, trajs, gap_hours=6.0, low=0.15, high=0.4, use_local=False):
    """Per-trajectory switching label, final-step rank, change-rate terms and mean step sizes."""
    from .model import collate
    from .predictor import ranks_of

    model.eval()
    batch = collate(trajs, model.config.use_local_time)
    scores, aux = model(batch, return_aux=True)
    step_ranks = ranks_of(scores["poi"].reshape(-1, scores["poi"].shape[-1]),
                          batch["y_poi"].reshape(-1)).reshape(batch["y_poi"].shape)
    dt = aux["layers"][0]["dt"].mean(-1) if aux["layers"] else None
    rows = []
    for i, t in enumerate(trajs):
        prof, _ = dataio.switching_profile(t, gap_hours, use_local)
        n = len(t) - 1
        rows.append({
            "label": dataio.subset_label(prof.frequency, low, high),
            "frequency": prof.frequency,
            "rank": int(step_ranks[i, n - 1]),
            "terms": dataio.change_rate_terms(step_ranks[i, :n], prof.scores),
            "dt": np.array([]) if dt is None else dt[i, :n].numpy(),
        })
    model.train()
    return rows


def cmd_scene(cfg: RunConfig) -> dict:
    from .engine.train import load_checkpoint

    state, _, _ = load_checkpoint(_checkpoint_path(cfg), use_best=cfg.eval.use_best)
    splits, _, _ = load_splits(cfg)
    trajs = splits["test"]
    if not trajs:
        raise DataError("test split is empty")
    s = cfg.scene
    rows = scene_analysis(state.model, trajs, s.gap_hours, s.low, s.high, cfg.model.use_local_time)
    subsets = dataio.balance_subsets(trajs, [r["label"] for r in rows])
    all_dt = np.concatenate([r["dt"] for r in rows])
    edges = np.linspace(all_dt.min(), all_dt.max(), s.bins + 1) if all_dt.size else np.zeros(s.bins + 1)
    summary, hist = [], []
    for name in dataio.SUBSETS:
        idx = subsets[name]
        if not idx:
            summary.append((name, 0, "", "", "", ""))
            continue
        ranks = np.array([rows[i]["rank"] for i in idx])
        terms = [x for i in idx for x in rows[i]["terms"]]
        dts = np.concatenate([rows[i]["dt"] for i in idx])
        summary.append((name, len(idx), float(np.mean(ranks <= 5)), float(np.mean(ranks <= 10)),
                        float(np.mean(terms)) if terms else "", float(dts.mean()) if dts.size else ""))
        counts, _ = np.histogram(dts, bins=edges)
        hist += [(name, float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    out = _out(cfg)
    _write_rows(out / "scene_metrics.csv", ("subset", "n", "ACC@5", "ACC@10", "change_rate", "mean_dt"), summary)
    _write_rows(out / "scene_dt_hist.csv", ("subset", "bin_lo", "bin_hi", "count"), hist)
    _write_rows(out / "scene_labels.csv", ("index", "user", "frequency", "label"),
                ((i, t.user, r["frequency"], r["label"]) for i, (t, r) in enumerate(zip(trajs, rows))))
    return {name: n for name, n, *_ in summary}


def cmd_viz(cfg: RunConfig) -> dict:
    from .embeddings import load_tables

    tables, _ = load_tables(_tables_path(cfg))
    splits, sizes, vocab = load_splits(cfg)
    if vocab is not None:
        poi_category = vocab.poi_category
    else:
        poi_category = np.zeros(sizes["poi"], dtype=np.int64)
        for t in (t for s in SPLITS for t in splits[s]):
            poi_category[t.pois] = t.cats
    tangents = {k: tables.vectors[k].detach().numpy() for k in ("poi", "category")}
    rows = dataio.poincare_viz_rows(tangents, poi_category, tables.c)
    _write_rows(_out(cfg) / "poincare.csv", dataio.VIZ_FIELDS, rows)
    return {"rows": len(rows)}


def time_scan(L: int, d: int, d_ctx: int = 40, repeats: int = 5, batch: int = 1, seed: int = 0) -> float:
    """Median wall time of one GTR layer forward pass over a length-``L`` sequence."""
    from . import manifold as M
    from .gtr_ssm import GTRLayer

    g = torch.Generator().manual_seed(seed)
    layer = GTRLayer(d, d_ctx, seed=seed)
    q = M.exp_o(0.5 * torch.randn(batch, L, d, generator=g, dtype=torch.float64))
    u = torch.randn(batch, L, d_ctx, generator=g, dtype=torch.float64)
    gamma = torch.rand(batch, L, generator=g, dtype=torch.float64)
    times = []
    with torch.no_grad():
        layer(q[:, :2], u[:, :2], gamma[:, :2])  # warm-up
        for _ in range(repeats):
            start = time.perf_counter()
            layer(q, u, gamma)
            times.append(time.perf_counter() - start)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig) -> dict:
    b = cfg.bench
    d_ctx = cfg.model.d_geo + cfg.model.d_time
    cells = [("length", L, b.d) for L in b.lengths] + [("dim", 512, d) for d in b.dims]
    rows, result = [], {}
    for sweep, L, d in cells:
        try:
            t = time_scan(L, d, d_ctx, b.repeats, b.batch, cfg.seed)
            rows.append((sweep, L, d, t, "ok"))
            result[(sweep, L, d)] = t
        except (GTRError, RuntimeError, MemoryError) as exc:
            log.error("bench cell %s L=%d d=%d failed: %s", sweep, L, d, exc)
            rows.append((sweep, L, d, "", f"error: {exc}"))
    _write_rows(_out(cfg) / "bench.csv", ("sweep", "L", "d", "median_seconds", "status"), rows)
    return {f"{k[0]}:L={k[1]}:d={k[2]}": v for k, v in result.items()}


COMMANDS = {"ingest": cmd_ingest, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "scene": cmd_scene, "viz": cmd_viz, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtrmamba", description="Hyperbolic selective-SSM next-POI recommender.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--ablate", action="append", default=[], metavar="NAME",
                        help="disable a component (ssm, pretrained-init, hyperbolic-mode, st-channel, "
                             "attention, context-drive); repeatable")
    parser.add_argument("--set", action="append", default=[], dest="overrides", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.epochs=5")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out, args.ablate)
        torch.manual_seed(cfg.seed)
        result = COMMANDS[args.command](cfg)
    except GTRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return StorageError.exit_code
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
