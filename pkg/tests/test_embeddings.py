import math

import numpy as np
import pytest
import torch

from gtrmamba import manifold as M
from gtrmamba.dataio import Trajectory
from gtrmamba.embeddings import (EDGE_TYPES, EdgeSet, EntityTables, FusionWeights, PretrainConfig, Rotations,
                                 build_edges, contrastive_loss, edge_loss, fuse_semantics, load_tables, pretrain,
                                 sample_negatives, save_tables, score_edge)
from gtrmamba.engine import central_differences, relative_error
from gtrmamba.errors import ConfigError, DataError, OrderingError
from gtrmamba.synthetic import T0, tree_corpus

SIZES = {"user": 2, "poi": 4, "category": 3, "region": 2}


def traj(user, pois, hours, cats=None, regions=None):
    n = len(pois)
    cats = [0] * n if cats is None else cats
    regions = [0] * n if regions is None else regions
    return Trajectory(user, pois, cats, regions, [T0 + int(h * 3600) for h in hours], [40.0] * n, [-74.0] * n)


class TestBuildEdges:
    def test_hand_trace(self):
        e = build_edges([traj(0, [0, 1, 1], [10, 12, 30], cats=[0, 1, 1], regions=[1, 0, 0])])
        assert e["up"].pairs() == {(0, 0), (0, 1)}
        assert e["pp"].pairs() == {(0, 1)}
        assert e["cc"].pairs() == {(0, 1)}
        assert e["rr"].pairs() == {(1, 0)}

    def test_seven_hour_gap(self):
        e = build_edges([traj(0, [0, 1, 2], [0, 7, 14])])
        assert len(e["pp"]) == 0 and len(e["up"]) == 3

    def test_empty(self):
        assert all(len(es) == 0 for es in build_edges([]).values())

    def test_user_order_invariant(self):
        a = traj(0, [0, 1, 2], [0, 1, 2])
        b = traj(1, [2, 3, 0], [0, 2, 3])
        e1, e2 = build_edges([a, b]), build_edges([b, a])
        for t in EDGE_TYPES:
            assert np.array_equal(e1[t].src, e2[t].src) and np.array_equal(e1[t].weight, e2[t].weight)

    def test_multiplicity(self):
        e = build_edges([traj(0, [0, 1, 0, 1], [0, 1, 2, 3])])
        w = dict(zip(zip(e["pp"].src.tolist(), e["pp"].dst.tolist()), e["pp"].weight.tolist()))
        assert w == {(0, 1): 2, (1, 0): 1}

    def test_unsorted_rejected(self):
        t = traj(0, [0, 1, 2], [0, 1, 2])
        t.timestamps = t.timestamps[::-1].copy()
        with pytest.raises(OrderingError):
            build_edges([t])


class TestScoreEdge:
    zero = torch.zeros(2, dtype=torch.float64)

    def test_coincident_origin(self):
        o = M.origin(4)
        assert score_edge(o, o, self.zero, 0.0, 0.0).item() == 0

    def test_bias_additivity(self):
        o = M.origin(4)
        assert score_edge(o, o, self.zero, 1.0, 2.0).item() == 3

    def test_unit_distance(self):
        src = M.exp_o(torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
        assert score_edge(src, M.origin(4), self.zero, 0.0, 0.0).item() == pytest.approx(-2 * (math.cosh(1) - 1))


class TestLoss:
    def test_half_sigmoids(self):
        loss = edge_loss(torch.zeros(1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64))
        assert loss.item() == pytest.approx(-2 * math.log(0.5))
        assert loss.item() == pytest.approx(1.3863, abs=1e-4)

    def test_saturated(self):
        loss = edge_loss(torch.tensor([50.0], dtype=torch.float64), torch.tensor([[-50.0]], dtype=torch.float64))
        assert loss.item() < 1e-20

    def test_contrastive_on_zero_tables(self):
        tables = EntityTables({"user": 1, "poi": 2, "category": 1, "region": 1}, 4, std=0.0)
        edges = {"pp": EdgeSet("pp", np.array([0]), np.array([1]), np.array([1]))}
        loss = contrastive_loss(edges, tables, Rotations(4), negatives_per_edge=1)
        assert loss.item() == pytest.approx(-2 * math.log(0.5))

    def test_negatives_exclude_target(self, gen):
        dst = torch.randint(0, 7, (500,), generator=gen)
        neg = sample_negatives(dst, 7, 5, gen)
        assert (neg != dst[:, None]).all() and neg.min() >= 0 and neg.max() < 7
        assert set(neg.flatten().tolist()) == set(range(7))

    def test_single_entity_is_config_error(self, gen):
        with pytest.raises(ConfigError):
            sample_negatives(torch.zeros(3, dtype=torch.long), 1, 2, gen)

    def test_gradient_matches_finite_differences(self):
        trajs = [traj(0, [0, 1, 2], [0, 1, 2], cats=[0, 1, 2], regions=[0, 1, 1])]
        sizes = {"user": 1, "poi": 3, "category": 3, "region": 2}
        tables = EntityTables(sizes, 4, seed=3, std=0.3)
        rot = Rotations(4)
        with torch.no_grad():
            for a in rot.angles.values():
                a.uniform_(-1, 1)
        edges = build_edges(trajs)
        params = dict(tables.named_parameters()) | {f"rot.{k}": v for k, v in rot.named_parameters()}
        fn = lambda: contrastive_loss(edges, tables, rot, 2, torch.Generator().manual_seed(0))
        loss = fn()
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        numeric = central_differences(fn, params)
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            assert relative_error(g, numeric[name]).max().item() < 1e-4, name


class TestPretrain:
    def test_zero_epochs_returns_init(self):
        trajs, sizes = tree_corpus()
        tables, _, hist = pretrain(trajs, sizes, PretrainConfig(dim=8, epochs=0, seed=5))
        ref = EntityTables(sizes, 8, seed=5)
        assert hist == []
        for k in ref.vectors:
            assert torch.equal(tables.vectors[k], ref.vectors[k])

    def test_deterministic(self):
        trajs, sizes = tree_corpus()
        cfg = PretrainConfig(dim=8, epochs=3, seed=2)
        a, ra, ha = pretrain(trajs, sizes, cfg)
        b, rb, hb = pretrain(trajs, sizes, cfg)
        assert ha == hb
        for k in a.vectors:
            assert torch.equal(a.vectors[k], b.vectors[k])
        for t in EDGE_TYPES:
            assert torch.equal(ra.angles[t], rb.angles[t])

    def test_smoothed_loss_nonincreasing(self):
        trajs, sizes = tree_corpus()
        _, _, hist = pretrain(trajs, sizes, PretrainConfig(dim=16, epochs=40, lr=0.005))
        smooth = np.convolve(hist, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) <= 0)
        assert hist[-1] < hist[0]

    def test_hierarchy(self):
        trajs, sizes = tree_corpus(seed=1)
        tables, _, _ = pretrain(trajs, sizes, PretrainConfig(dim=16, epochs=100, lr=0.05, seed=1))
        radius = lambda k: M.lorentz_to_poincare(tables.points(k)).norm(dim=-1).mean().item()
        assert radius("category") < radius("poi")


class TestFusion:
    def test_origin_tables(self):
        tables = EntityTables(SIZES, 4, std=0.0)
        idx = torch.tensor([[0, 1]])
        v = fuse_semantics(torch.tensor([0]), idx, idx, idx, tables)
        assert torch.equal(v, torch.zeros(1, 2, 4, dtype=torch.float64))

    def test_poi_selection(self):
        tables = EntityTables(SIZES, 4, seed=1, std=0.5)
        idx = torch.tensor([[0, 3]])
        v = fuse_semantics(torch.tensor([1]), idx, idx % 3, idx % 2, tables, FusionWeights(0, 1, 0, 0))
        assert torch.allclose(v, M.log_o(tables.points("poi")[idx]), atol=1e-14)

    def test_default_weights_recomputed(self):
        tables = EntityTables(SIZES, 4, seed=1, std=0.5)
        u, p, c, r = torch.tensor([1]), torch.tensor([[2, 0]]), torch.tensor([[1, 2]]), torch.tensor([[0, 1]])
        v = fuse_semantics(u, p, c, r, tables)
        lg = lambda k, i: M.log_o(M.exp_o(tables.vectors[k][i]))
        ref = 0.5 * lg("user", u)[:, None] + 0.3 * lg("poi", p) + 0.1 * lg("category", c) + 0.1 * lg("region", r)
        assert torch.allclose(v, ref, atol=1e-14)

    def test_unknown_index(self):
        tables = EntityTables(SIZES, 4)
        with pytest.raises(DataError):
            fuse_semantics(torch.tensor([5]), torch.tensor([[0]]), torch.tensor([[0]]), torch.tensor([[0]]), tables)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            FusionWeights(-0.1, 0.3, 0.1, 0.1)


@pytest.mark.parametrize("suffix", [".npz", ".csv"])
def test_tables_roundtrip(tmp_path, suffix):
    tables = EntityTables(SIZES, 6, seed=4, std=0.3)
    rot = Rotations(6)
    with torch.no_grad():
        rot.angles["pp"].fill_(0.25)
        tables.biases["poi"].fill_(-1.5)
    save_tables(tmp_path / "t", tables, rot)
    back, rback = load_tables(tmp_path / f"t{suffix}")
    for k in tables.vectors:
        assert torch.equal(back.vectors[k], tables.vectors[k])
        assert torch.equal(back.biases[k], tables.biases[k])
    assert torch.equal(rback.angles["pp"], rot.angles["pp"])
