import math

import numpy as np
import pytest
import torch

from gtrmamba import dataio as D
from gtrmamba.errors import ConfigError, DataError, OrderingError
from gtrmamba.synthetic import T0, checkins_from, tree_corpus

ROWS = [
    "u1\tp1\tc1\tCafe\t40.5\t-74.25\t-240\tTue Apr 03 18:00:09 +0000 2012",
    "u1\tp2\tc2\tBar\t40.75\t-73.5\t-240\tTue Apr 03 19:30:00 +0000 2012",
    "u2\tp1\tc1\tCafe\t40.5\t-74.25\t-300\tWed Apr 04 01:00:00 +0000 2012",
]


def write(tmp_path, lines, name="raw.tsv"):
    p = tmp_path / name
    p.write_text("".join(line + "\n" for line in lines), encoding="latin-1")
    return p


def checkin(user, poi, cat, hours, lat=40.0, lon=-74.0):
    return D.CheckIn(user, poi, cat, lat, lon, T0 + int(hours * 3600))


class TestIngest:
    def test_empty(self, tmp_path):
        out, rep = D.ingest(write(tmp_path, []))
        assert out == [] and rep.malformed == 0 and rep.rows == 0

    def test_fixture_roundtrip(self, tmp_path):
        out, rep = D.ingest(write(tmp_path, ROWS))
        assert rep.parsed == 3 and rep.malformed == 0
        assert out[0] == D.CheckIn("u1", "p1", "c1", 40.5, -74.25, 1333476009, -240)
        assert out[2].timestamp == 1333501200 and out[2].tz_offset_min == -300

    def test_out_of_range_row_skipped(self, tmp_path):
        bad = ROWS[0].replace("40.5", "95")
        out, rep = D.ingest(write(tmp_path, ROWS * 4 + [bad]), max_malformed_frac=0.5)
        assert rep.parsed == 12 and rep.malformed == 1 and rep.reasons["out_of_range"] == 1

    def test_too_many_malformed(self, tmp_path):
        with pytest.raises(DataError):
            D.ingest(write(tmp_path, ROWS + ["garbage"]))

    def test_header_and_names(self, tmp_path):
        lines = ["uid,venue,cat,la,lo,ts", "a,v,k,1.5,2.5,1333476009"]
        cols = {"user": "uid", "poi": "venue", "category": "cat", "lat": "la", "lon": "lo", "time": "ts"}
        out, _ = D.ingest(write(tmp_path, lines, "x.csv"), cols, ",", True, "unix")
        assert out == [D.CheckIn("a", "v", "k", 1.5, 2.5, 1333476009)]

    def test_missing_mapping(self, tmp_path):
        with pytest.raises(ConfigError):
            D.ingest(write(tmp_path, ROWS), {"user": 0})


class TestFilter:
    def test_threshold_boundary(self):
        rows = [checkin("u", "four", "c", h) for h in range(4)] + [checkin("u", "five", "c", h) for h in range(5)]
        vocab, kept = D.filter_and_index(rows)
        assert vocab.pois == ["five"] and len(kept) == 5

    def test_order_independent(self, rng):
        trajs, _ = tree_corpus()
        rows = checkins_from(trajs)
        shuffled = [rows[i] for i in rng.permutation(len(rows))]
        a, _ = D.filter_and_index(rows)
        b, _ = D.filter_and_index(shuffled)
        assert a.to_json() == b.to_json()

    def test_all_removed(self):
        with pytest.raises(DataError):
            D.filter_and_index([checkin("u", "p", "c", 0)])


class TestRegions:
    def test_single_region(self):
        assert D.partition_regions([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], k=1).tolist() == [0, 0, 0]

    def test_two_blobs(self, rng):
        lat = np.r_[40 + 0.01 * rng.standard_normal(20), 35 + 0.01 * rng.standard_normal(20)]
        lon = np.r_[-74 + 0.01 * rng.standard_normal(20), -118 + 0.01 * rng.standard_normal(20)]
        lab = D.partition_regions(lat, lon, k=2)
        assert len(set(lab[:20])) == 1 and len(set(lab[20:])) == 1 and lab[0] != lab[20]

    def test_deterministic(self, rng):
        lat, lon = 40 + rng.random(50), -74 + rng.random(50)
        assert np.array_equal(D.partition_regions(lat, lon, 5, seed=3), D.partition_regions(lat, lon, 5, seed=3))

    def test_too_few_points(self):
        with pytest.raises(ConfigError):
            D.partition_regions([1.0, 1.0], [2.0, 2.0], k=2)


def vocab_for(rows):
    vocab, kept = D.filter_and_index(rows, min_poi_checkins=1)
    vocab.poi_region = np.zeros(len(vocab.pois), dtype=np.int64)
    vocab.n_regions = 1
    return vocab, kept


class TestSegment:
    def test_short_segment_dropped(self):
        rows = [checkin("u", "a", "c", 0), checkin("u", "b", "c", 1), checkin("u", "a", "c", 100),
                checkin("u", "b", "c", 101), checkin("u", "a", "c", 102)]
        splits, rep = D.segment_and_split(*reversed(vocab_for(rows)))
        assert rep.dropped_short == 1 and rep.segments == 1
        assert [len(t) for t in splits["train"]] == [3]

    def test_chunking(self):
        rows = [checkin("u", f"p{i % 7}", "c", i) for i in range(205)]
        splits, _ = D.segment_and_split(*reversed(vocab_for(rows)))
        lengths = [len(t) for s in splits.values() for t in s]
        assert sorted(lengths) == [68, 68, 69] and sum(lengths) == 205
        assert all(3 <= n <= 101 for n in lengths)

    def test_ratio(self):
        rows = [checkin("u", f"p{j}", "c", 48 * i + j) for i in range(10) for j in range(3)]
        splits, _ = D.segment_and_split(*reversed(vocab_for(rows)))
        assert [len(splits[s]) for s in ("train", "val", "test")] == [8, 1, 1]
        assert splits["train"][-1].timestamps[0] < splits["val"][0].timestamps[0] < splits["test"][0].timestamps[0]

    def test_requires_regions(self):
        vocab, kept = D.filter_and_index([checkin("u", "a", "c", h) for h in range(3)], 1)
        with pytest.raises(ConfigError):
            D.segment_and_split(kept, vocab)


class TestTrajectory:
    def test_decreasing_time(self):
        with pytest.raises(OrderingError):
            D.Trajectory(0, [0, 1, 2], [0] * 3, [0] * 3, [3, 2, 1], [0.0] * 3, [0.0] * 3)

    def test_length_bounds(self):
        with pytest.raises(DataError):
            D.Trajectory(0, [0, 1], [0] * 2, [0] * 2, [1, 2], [0.0] * 2, [0.0] * 2)

    def test_manifest_roundtrip(self, tmp_path):
        rows = [checkin("u", f"p{j}", "c", 48 * i + j) for i in range(3) for j in range(4)]
        vocab, kept = vocab_for(rows)
        splits, _ = D.segment_and_split(kept, vocab)
        D.write_manifest(tmp_path / "m.tsv", splits["train"])
        D.save_vocab(tmp_path / "v.json", vocab)
        back = D.read_manifest(tmp_path / "m.tsv", D.load_vocab(tmp_path / "v.json"))
        for a, b in zip(splits["train"], back):
            assert np.array_equal(a.pois, b.pois) and np.array_equal(a.timestamps, b.timestamps)

    def test_manifest_bad_header(self, tmp_path):
        (tmp_path / "m.tsv").write_text("nope\n")
        with pytest.raises(DataError):
            D.read_manifest(tmp_path / "m.tsv", None)


def switching_traj(hours, cats):
    n = len(hours)
    return D.Trajectory(0, list(range(n)), cats, [0] * n, [T0 + int(h * 3600) for h in hours], [0.0] * n, [0.0] * n)


class TestSwitching:
    def test_calm(self):
        prof, label = D.switching_profile(switching_traj([7, 8, 9], [0, 0, 0]))
        assert prof.scores.tolist() == [0, 0] and label == "low"

    def test_full_switch(self):
        prof, _ = D.switching_profile(switching_traj([1, 9, 17.5], [0, 1, 2]))
        assert prof.scores.tolist() == [1, 1]

    @pytest.mark.parametrize("freq,label", [(0.1, "low"), (0.26, "medium"), (0.5, "high"), (0.15, "medium")])
    def test_labels(self, freq, label):
        assert D.subset_label(freq) == label

    def test_change_rate_hand_trace(self):
        # transitions 0->1 (score 1) and 1->2 (score 0); only the first is a transition point
        assert D.change_rate_terms([1, 4, 2], [1.0, 0.0, 1.0]) == [3.0]
        assert D.change_rate_terms([2, 5], [1.0, 1.0]) == [3.0]

    def test_balance_partitions(self):
        trajs = [switching_traj(list(range(n)), [0] * n) for n in (3, 4, 5, 6, 7, 8)]
        groups = D.balance_subsets(trajs, ["low", "low", "low", "high", "high", "medium"])
        assert {k: len(v) for k, v in groups.items()} == {"low": 1, "medium": 1, "high": 1}
        picked = [i for v in groups.values() for i in v]
        assert len(set(picked)) == len(picked)


class TestViz:
    def test_radii(self):
        tangents = {"poi": np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [30.0, 1.0, 0.0]])}
        rows = D.poincare_viz_rows(tangents, np.array([0, 1, 1]))
        radii = [r[2] for r in rows if r[0] == "poi"]
        assert radii[0] == 0 and radii[1] == pytest.approx(math.tanh(1), abs=1e-12)
        assert all(r < 1 for r in radii)
        assert [r[6] for r in rows if r[0] == "link"] == [0, 1, 1]

    def test_csv(self, tmp_path):
        D.write_csv(tmp_path / "v.csv", D.VIZ_FIELDS, D.poincare_viz_rows({"category": np.ones((2, 3))}))
        lines = (tmp_path / "v.csv").read_text().splitlines()
        assert lines[0] == ",".join(D.VIZ_FIELDS) and len(lines) == 3
