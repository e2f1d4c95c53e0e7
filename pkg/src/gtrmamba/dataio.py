"""Check-in ingestion, vocabulary building, region partitioning, segmentation,
scene-switching profiles and Poincaré-disk export."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, OrderingError, StorageError

log = logging.getLogger(__name__)

MIN_LEN = 3
MAX_LEN = 101
SUBSETS = ("low", "medium", "high")


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    category_id: str
    lat: float
    lon: float
    timestamp: int  # UTC seconds
    tz_offset_min: int = 0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise DataError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass
class Trajectory:
    """One user's ordered check-in segment with resolved indices."""

    user: int
    pois: np.ndarray
    cats: np.ndarray
    regions: np.ndarray
    timestamps: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.pois = np.asarray(self.pois, dtype=np.int64)
        self.cats = np.asarray(self.cats, dtype=np.int64)
        self.regions = np.asarray(self.regions, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.lons = np.asarray(self.lons, dtype=np.float64)
        n = len(self.pois)
        self.offsets = np.zeros(n, dtype=np.int64) if self.offsets is None else np.asarray(self.offsets, dtype=np.int64)
        if not (MIN_LEN <= n <= MAX_LEN):
            raise DataError(f"trajectory length {n} outside [{MIN_LEN}, {MAX_LEN}]")
        lengths = {len(a) for a in (self.cats, self.regions, self.timestamps, self.lats, self.lons, self.offsets)}
        if lengths != {n}:
            raise DataError("trajectory fields have unequal lengths")
        if np.any(np.diff(self.timestamps) < 0):
            raise OrderingError(f"timestamps decrease in trajectory of user {self.user}")

    def __len__(self):
        return len(self.pois)

    def local_times(self, use_local: bool = False) -> np.ndarray:
        return self.timestamps + 60 * self.offsets if use_local else self.timestamps


@dataclass
class Vocab:
    users: list[str]
    pois: list[str]
    categories: list[str]
    poi_category: np.ndarray
    poi_lat: np.ndarray
    poi_lon: np.ndarray
    poi_region: np.ndarray | None = None
    n_regions: int = 0

    @property
    def sizes(self) -> dict[str, int]:
        return {"user": len(self.users), "poi": len(self.pois),
                "category": len(self.categories), "region": self.n_regions}

    def to_json(self) -> dict:
        return {
            "users": self.users, "pois": self.pois, "categories": self.categories,
            "poi_category": self.poi_category.tolist(),
            "poi_lat": self.poi_lat.tolist(), "poi_lon": self.poi_lon.tolist(),
            "poi_region": None if self.poi_region is None else self.poi_region.tolist(),
            "n_regions": self.n_regions,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Vocab":
        return cls(
            users=list(d["users"]), pois=list(d["pois"]), categories=list(d["categories"]),
            poi_category=np.asarray(d["poi_category"], dtype=np.int64),
            poi_lat=np.asarray(d["poi_lat"], dtype=np.float64),
            poi_lon=np.asarray(d["poi_lon"], dtype=np.float64),
            poi_region=None if d.get("poi_region") is None else np.asarray(d["poi_region"], dtype=np.int64),
            n_regions=int(d.get("n_regions", 0)),
        )


@dataclass
class IngestReport:
    rows: int = 0
    parsed: int = 0
    malformed: int = 0
    reasons: Counter = field(default_factory=Counter)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

DEFAULT_COLUMNS = {  # public Foursquare TSMC2014 dumps (no header)
    "user": 0, "poi": 1, "category": 2, "lat": 4, "lon": 5, "tz_offset": 6, "time": 7,
}
FOURSQUARE_TIME = "%a %b %d %H:%M:%S %z %Y"


def _parse_time(raw: str, time_format: str) -> int:
    raw = raw.strip()
    if time_format == "unix":
        return int(float(raw))
    dt = datetime.strptime(raw, time_format)
    if dt.tzinfo is None:
        raise ValueError("timestamp without timezone")
    return int(dt.timestamp())


def ingest(
    path,
    columns: Mapping[str, int | str] | None = None,
    delimiter: str = "\t",
    header: bool = False,
    time_format: str = FOURSQUARE_TIME,
    encoding: str = "latin-1",
    max_malformed_frac: float = 0.10,
) -> tuple[list[CheckIn], IngestReport]:
    """Parse a delimited check-in file into :class:`CheckIn` records.

    ``columns`` maps the fields ``user, poi, category, lat, lon, time`` (and
    optionally ``tz_offset`` in minutes) to column indices, or to column names
    when ``header`` is true. Malformed rows are skipped and counted.
    """
    columns = dict(DEFAULT_COLUMNS if columns is None else columns)
    missing = {"user", "poi", "category", "lat", "lon", "time"} - columns.keys()
    if missing:
        raise ConfigError(f"column mapping lacks {sorted(missing)}")
    try:
        fh = open(path, newline="", encoding=encoding)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc

    report = IngestReport()
    out: list[CheckIn] = []
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        if header:
            names = next(reader, None)
            if names is None:
                return out, report
            try:
                columns = {k: (names.index(v) if isinstance(v, str) else v) for k, v in columns.items()}
            except ValueError as exc:
                raise ConfigError(f"header lacks mapped column: {exc}") from exc
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            report.rows += 1
            try:
                off = columns.get("tz_offset")
                ci = CheckIn(
                    user_id=row[columns["user"]].strip(),
                    poi_id=row[columns["poi"]].strip(),
                    category_id=row[columns["category"]].strip(),
                    lat=float(row[columns["lat"]]),
                    lon=float(row[columns["lon"]]),
                    timestamp=_parse_time(row[columns["time"]], time_format),
                    tz_offset_min=int(float(row[off])) if off is not None else 0,
                )
            except (IndexError, ValueError) as exc:
                report.malformed += 1
                report.reasons[type(exc).__name__] += 1
                continue
            except DataError:
                report.malformed += 1
                report.reasons["out_of_range"] += 1
                continue
            if not (ci.user_id and ci.poi_id and math.isfinite(ci.lat) and math.isfinite(ci.lon)):
                report.malformed += 1
                report.reasons["empty_field"] += 1
                continue
            out.append(ci)
    report.parsed = len(out)
    if report.rows and report.malformed / report.rows > max_malformed_frac:
        raise DataError(
            f"{path}: {report.malformed}/{report.rows} malformed rows exceeds {max_malformed_frac:.0%}"
        )
    return out, report


def filter_and_index(checkins: Sequence[CheckIn], min_poi_checkins: int = 5) -> tuple[Vocab, list[CheckIn]]:
    """Drop POIs with fewer than ``min_poi_checkins`` visits and assign dense indices.

    Indices follow the sorted order of the raw identifiers, so the result does
    not depend on row order.
    """
    counts = Counter(c.poi_id for c in checkins)
    kept = [c for c in checkins if counts[c.poi_id] >= min_poi_checkins]
    if not kept:
        raise DataError("no check-ins left after POI filtering")

    users = sorted({c.user_id for c in kept})
    pois = sorted({c.poi_id for c in kept})
    categories = sorted({c.category_id for c in kept})
    poi_ix = {p: i for i, p in enumerate(pois)}
    cat_ix = {c: i for i, c in enumerate(categories)}

    cat_votes: dict[int, Counter] = defaultdict(Counter)
    lat_sum = np.zeros(len(pois))
    lon_sum = np.zeros(len(pois))
    n = np.zeros(len(pois))
    for c in kept:
        i = poi_ix[c.poi_id]
        cat_votes[i][c.category_id] += 1
        lat_sum[i] += c.lat
        lon_sum[i] += c.lon
        n[i] += 1
    poi_category = np.array(
        [cat_ix[min(cat_votes[i].items(), key=lambda kv: (-kv[1], kv[0]))[0]] for i in range(len(pois))],
        dtype=np.int64,
    )
    vocab = Vocab(users, pois, categories, poi_category, lat_sum / n, lon_sum / n)
    log.info("filtered: %d users, %d POIs, %d categories, %d check-ins",
             len(users), len(pois), len(categories), len(kept))
    return vocab, kept


def partition_regions(poi_lat, poi_lon, k: int = 40, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """K-means over POI unit-sphere vectors (Euclidean distance = chord length)."""
    from sklearn.cluster import KMeans

    from .stchannel import sphere_map

    pts = np.stack([sphere_map(la, lo) for la, lo in zip(poi_lat, poi_lon)]) if len(poi_lat) else np.zeros((0, 3))
    distinct = len({tuple(np.round(p, 12)) for p in pts})
    if k < 1 or distinct < k:
        raise ConfigError(f"cannot form {k} regions from {distinct} distinct POI locations")
    if k == 1:
        return np.zeros(len(pts), dtype=np.int64)
    km = KMeans(n_clusters=k, n_init=4, max_iter=max_iter, random_state=seed)
    return km.fit_predict(pts).astype(np.int64)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def _chunk(n: int, max_len: int) -> list[int]:
    """Split ``n`` items into the fewest near-equal chunks of at most ``max_len``."""
    parts = -(-n // max_len)
    base, extra = divmod(n, parts)
    return [base + 1] * extra + [base] * (parts - extra)


def _split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int]:
    cut1 = int(math.floor(n * ratios[0] + 0.5))
    cut2 = int(math.floor(n * (ratios[0] + ratios[1]) + 0.5))
    return cut1, cut2


@dataclass
class SegmentReport:
    segments: int = 0
    dropped_short: int = 0
    dropped_users: int = 0


def segment_and_split(
    checkins: Sequence[CheckIn],
    vocab: Vocab,
    gap_hours: float = 24.0,
    min_len: int = MIN_LEN,
    max_len: int = MAX_LEN,
    ratios=(0.8, 0.1, 0.1),
) -> tuple[dict[str, list[Trajectory]], SegmentReport]:
    """Cut each user's time-sorted check-ins at gaps over ``gap_hours`` and split
    the resulting segments chronologically per user."""
    if vocab.poi_region is None:
        raise ConfigError("regions must be partitioned before segmentation")
    user_ix = {u: i for i, u in enumerate(vocab.users)}
    poi_ix = {p: i for i, p in enumerate(vocab.pois)}
    by_user: dict[int, list[CheckIn]] = defaultdict(list)
    for c in checkins:
        by_user[user_ix[c.user_id]].append(c)

    report = SegmentReport()
    splits: dict[str, list[Trajectory]] = {"train": [], "val": [], "test": []}
    for u in sorted(by_user):
        rows = sorted(by_user[u], key=lambda c: (c.timestamp, c.poi_id))
        runs: list[list[CheckIn]] = [[rows[0]]]
        for prev, cur in zip(rows, rows[1:]):
            if cur.timestamp - prev.timestamp > gap_hours * 3600:
                runs.append([])
            runs[-1].append(cur)
        segments = []
        for run in runs:
            if len(run) < min_len:
                report.dropped_short += 1
                continue
            start = 0
            for size in _chunk(len(run), max_len):
                segments.append(run[start:start + size])
                start += size
        if not segments:
            report.dropped_users += 1
            continue
        trajs = []
        for seg in segments:
            p = np.array([poi_ix[c.poi_id] for c in seg])
            trajs.append(Trajectory(
                user=u, pois=p, cats=vocab.poi_category[p], regions=vocab.poi_region[p],
                timestamps=[c.timestamp for c in seg], lats=vocab.poi_lat[p], lons=vocab.poi_lon[p],
                offsets=[c.tz_offset_min for c in seg],
            ))
        cut1, cut2 = _split_counts(len(trajs), ratios)
        splits["train"] += trajs[:cut1]
        splits["val"] += trajs[cut1:cut2]
        splits["test"] += trajs[cut2:]
        report.segments += len(trajs)
    return splits, report


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("user", "pois", "cats", "regions", "timestamps", "offsets")


def write_manifest(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for t in trajs:
            w.writerow([t.user] + [" ".join(map(str, a.tolist())) for a in
                                   (t.pois, t.cats, t.regions, t.timestamps, t.offsets)])


def read_manifest(path, vocab: Vocab) -> list[Trajectory]:
    out = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        r = csv.reader(fh, delimiter="\t")
        head = next(r, None)
        if head is None or tuple(head) != MANIFEST_FIELDS:
            raise DataError(f"{path}: not a trajectory manifest")
        for line_no, row in enumerate(r, start=2):
            try:
                user = int(row[0])
                pois, cats, regions, ts, offs = (np.array(list(map(int, f.split()))) for f in row[1:6])
                out.append(Trajectory(user, pois, cats, regions, ts,
                                      vocab.poi_lat[pois], vocab.poi_lon[pois], offs))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
    return out


def save_vocab(path, vocab: Vocab) -> None:
    Path(path).write_text(json.dumps(vocab.to_json()))


def load_vocab(path) -> Vocab:
    try:
        return Vocab.from_json(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise StorageError(f"cannot read vocabulary {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# scene switching
# ---------------------------------------------------------------------------

@dataclass
class SwitchProfile:
    scores: np.ndarray  # one per transition, in [0, 1]
    frequency: float


def time_period(hours: np.ndarray) -> np.ndarray:
    """0 night [0, 6), 1 morning [6, 12), 2 afternoon [12, 18), 3 evening [18, 24)."""
    return np.asarray(hours) // 6


def subset_label(frequency: float, low: float = 0.15, high: float = 0.4) -> str:
    if frequency < low:
        return "low"
    if frequency > high:
        return "high"
    return "medium"


def switching_profile(traj: Trajectory, gap_hours: float = 6.0, use_local: bool = False) -> tuple[SwitchProfile, str]:
    """Per-transition switching score: mean of (period changed, gap > ``gap_hours``, category changed)."""
    ts = traj.local_times(use_local)
    if len(ts) < 2:
        raise DataError("switching profile needs at least one transition")
    period = time_period((ts // 3600) % 24)
    changed_period = period[1:] != period[:-1]
    long_gap = np.diff(traj.timestamps) > gap_hours * 3600
    changed_cat = traj.cats[1:] != traj.cats[:-1]
    scores = (changed_period.astype(float) + long_gap + changed_cat) / 3.0
    freq = float(scores.mean())
    return SwitchProfile(scores, freq), subset_label(freq)


HIGH_SWITCH_SCORE = 2.0 / 3.0


def change_rate_terms(step_ranks, scores, threshold: float = HIGH_SWITCH_SCORE) -> list[float]:
    """Rank shifts of the true next POI across each high-switching transition.

    ``step_ranks[i]`` is the rank of the true POI when predicting check-in
    ``i + 1`` from the prefix ending at ``i``; ``scores[i]`` is the switching
    score of the transition ``i -> i + 1``. A transition with a score of at
    least ``threshold`` contributes ``|step_ranks[i + 1] - step_ranks[i]|``
    (the prediction just after it minus the one just before it) when both
    exist. The change rate of a subset is the mean over all its terms.
    """
    r = np.asarray(step_ranks, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if len(r) != len(s):
        raise DataError("need one rank per transition")
    return [float(abs(r[i + 1] - r[i])) for i in range(len(s) - 1) if s[i] >= threshold]


def balance_subsets(trajs: Sequence[Trajectory], labels: Sequence[str]) -> dict[str, list[int]]:
    """Equal-size subsets, preferring trajectories whose length is closest to the median.

    Returns trajectory indices per label, truncated to the smallest non-empty subset.
    """
    median = float(np.median([len(t) for t in trajs])) if trajs else 0.0
    groups: dict[str, list[int]] = {k: [] for k in SUBSETS}
    for i, lab in enumerate(labels):
        groups[lab].append(i)
    sizes = [len(g) for g in groups.values() if g]
    keep = min(sizes) if sizes else 0
    return {k: sorted(g, key=lambda i: (abs(len(trajs[i]) - median), i))[:keep] for k, g in groups.items()}


# ---------------------------------------------------------------------------
# visualisation export
# ---------------------------------------------------------------------------

VIZ_FIELDS = ("kind", "id", "radius", "angle", "x", "y", "target")


def poincare_viz_rows(tangents: Mapping[str, np.ndarray], poi_category: np.ndarray | None = None,
                      c: float = 1.0) -> list[tuple]:
    """Map tangent-parameterised tables to 2-D disk coordinates.

    Each entity becomes ``(kind, id, radius, angle, x, y, "")``: the radius is
    the norm of its full Poincaré-ball coordinates and the angle comes from the
    first two ball coordinates. POI->category link rows use kind ``link``.
    """
    import torch

    from .manifold import exp_o, lorentz_to_poincare

    rows = []
    for kind, vecs in tangents.items():
        ball = lorentz_to_poincare(exp_o(torch.as_tensor(np.asarray(vecs), dtype=torch.float64), c), c).numpy()
        radius = np.linalg.norm(ball, axis=-1)
        second = ball[:, 1] if ball.shape[1] > 1 else np.zeros(len(ball))
        angle = np.arctan2(second, ball[:, 0])
        for i in range(len(ball)):
            rows.append((kind, i, float(radius[i]), float(angle[i]),
                         float(radius[i] * np.cos(angle[i])), float(radius[i] * np.sin(angle[i])), ""))
    if poi_category is not None:
        rows += [("link", i, "", "", "", "", int(cat)) for i, cat in enumerate(poi_category)]
    return rows


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
