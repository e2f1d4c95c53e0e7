"""Synthetic corpora used by tests, the acceptance suite and the CLI demos."""

from __future__ import annotations

import numpy as np

from .dataio import CheckIn, Trajectory

T0 = 1_333_238_400  # 2012-04-01 00:00 UTC


def tree_corpus(n_categories: int = 3, pois_per_category: int = 10, users_per_category: int = 3,
                trajs_per_user: int = 8, length: int = 8, p_cross: float = 0.3, seed: int = 0):
    """Users anchored to a home category, 1-hour gaps between visits.

    Each visit stays in the home category except with probability ``p_cross``
    where it lands in a uniformly drawn category. POI ``p`` belongs to category
    ``p // pois_per_category``; regions coincide with categories.
    Returns ``(trajectories, sizes)``.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    n_users = n_categories * users_per_category
    for u in range(n_users):
        home = u % n_categories
        for k in range(trajs_per_user):
            cats = np.where(rng.random(length) < p_cross, rng.integers(0, n_categories, length), home)
            pois = cats * pois_per_category + rng.integers(0, pois_per_category, size=length)
            start = T0 + (u * trajs_per_user + k) * 7 * 86400
            ts = start + 3600 * np.arange(length)
            lat = 40.70 + 0.05 * cats + 0.001 * (pois % pois_per_category)
            lon = -74.00 + 0.001 * (pois % pois_per_category)
            trajs.append(Trajectory(u, pois, cats, cats, ts, lat, lon))
    sizes = {"user": n_users, "poi": n_categories * pois_per_category,
             "category": n_categories, "region": n_categories}
    return trajs, sizes


def loop_trajectory(n_pois: int = 5, repeats: int = 4, gap_s: int = 3600, user: int = 0) -> Trajectory:
    """One user cycling through ``n_pois`` POIs in a fixed order."""
    pois = np.tile(np.arange(n_pois), repeats)
    ts = T0 + gap_s * np.arange(len(pois))
    return Trajectory(user, pois, pois % 2, pois % 2, ts, 40.7 + 0.01 * pois, -74.0 + 0.01 * pois)


def switching_corpus(n_users: int = 12, trajs_per_user: int = 6, length: int = 12, n_pois: int = 24,
                     n_categories: int = 4, seed: int = 0):
    """Half the trajectories switch regime at every step (long gaps, period and
    category changes); the other half stay within one category at 30-minute gaps.

    Low-switching trajectories walk a fixed POI ring so the next POI follows
    from the current one. High-switching trajectories hop in random order among
    three POIs of distinct categories, so only the visit history (not the
    current POI) narrows down the next one.

    Returns ``(trajectories, labels, sizes)`` with labels ``"low"``/``"high"``.
    """
    rng = np.random.default_rng(seed)
    per_cat = n_pois // n_categories
    trajs, labels = [], []
    for u in range(n_users):
        for k in range(trajs_per_user):
            start = T0 + (u * trajs_per_user + k) * 14 * 86400 + 8 * 3600
            if (u + k) % 2 == 0:
                cat = rng.integers(n_categories)
                first = rng.integers(per_cat)
                pois = cat * per_cat + (first + np.arange(length)) % per_cat
                ts = start + 1800 * np.arange(length)
                labels.append("low")
            else:
                theme = rng.permutation(n_categories)[:3] * per_cat + rng.integers(per_cat, size=3)
                steps = rng.integers(1, 3, size=length)
                pois = theme[np.cumsum(steps) % 3]
                ts = start + 9 * 3600 * np.arange(length)
                labels.append("high")
            cats = pois // per_cat
            trajs.append(Trajectory(u, pois, cats, cats, ts,
                                    40.6 + 0.02 * (pois % 7), -74.1 + 0.02 * (pois // 7)))
    sizes = {"user": n_users, "poi": n_pois, "category": n_categories, "region": n_categories}
    return trajs, labels, sizes


def checkins_from(trajs, categories: str = "c") -> list[CheckIn]:
    """Flatten trajectories back into raw check-in records with string ids."""
    out = []
    for t in trajs:
        for p, c, ts, la, lo, off in zip(t.pois, t.cats, t.timestamps, t.lats, t.lons, t.offsets):
            out.append(CheckIn(f"u{t.user}", f"p{p}", f"{categories}{c}", float(la), float(lo), int(ts), int(off)))
    return out
