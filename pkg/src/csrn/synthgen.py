"""Synthetic click corpora with planted user clusters and cluster-scoped
news bursts.

Users belong to clusters; each cluster concentrates its reading on its own
categories.  A burst temporarily multiplies one item's click probability
inside a single cluster, which is exactly the group-scoped emerging-topic
signal a neighbor-aware recommender can exploit and a sequence-only one
cannot.  Ground-truth labels are emitted for test assertions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .corpus import EventStream


@dataclass(frozen=True)
class SynthConfig:
    users: int = 2000
    items: int = 1000
    clusters: int = 4
    categories: int = 8
    events_per_user: float = 100.0
    burst_rate: float = 1.0          # fraction of items that burst once, in [0, 1]
    burst_mult: float = 200.0        # peak click-probability multiplier
    burst_decay: float = 86400.0     # seconds; e-folding time after onset
    concentration: float = 25.0      # own-category weight vs 1 elsewhere; inf = disjoint
    horizon: int = 30 * 86400
    seed: int = 0

    def __post_init__(self):
        if self.clusters > self.users:
            raise ValueError("clusters must be <= users")
        if self.categories > self.items:
            raise ValueError("categories must be <= items")
        for name in ("events_per_user", "burst_mult", "burst_decay",
                     "concentration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not (0.0 <= self.burst_rate <= 1.0):
            raise ValueError("burst_rate must be in [0, 1]")
        if self.users * self.events_per_user < 1:
            raise ValueError("config generates no events")


@dataclass
class SynthLabels:
    user_cluster: np.ndarray   # I
    item_category: np.ndarray  # J
    bursts: np.ndarray         # n x 3 columns (item, start, cluster)


def generate(cfg: SynthConfig):
    """Returns (EventStream, SynthLabels); deterministic given cfg.seed."""
    gen = numerics.rng(cfg.seed)
    I, J, G, C = cfg.users, cfg.items, cfg.clusters, cfg.categories
    user_cluster = gen.permutation(np.arange(I) % G)
    item_category = gen.permutation(np.arange(J) % C)
    base_pop = gen.lognormal(0.0, 1.0, size=J)

    # cluster g prefers categories with c % G == g
    pref = np.ones((G, C))
    own = (np.arange(C) % G)[None, :] == np.arange(G)[:, None]
    if math.isinf(cfg.concentration):
        pref[:] = 0.0
        pref[own] = 1.0
    else:
        pref[own] = cfg.concentration
    pref /= pref.sum(axis=1, keepdims=True)

    n_bursts = int(round(cfg.burst_rate * J))
    burst_items = gen.choice(J, size=n_bursts, replace=False)
    burst_starts = gen.integers(0, cfg.horizon, size=n_bursts)
    burst_clusters = item_category[burst_items] % G
    bursts = np.stack([burst_items, burst_starts, burst_clusters], axis=1).astype(np.int64)

    # per-category item lists and per-(cluster, category) burst lists
    cat_items = [np.flatnonzero(item_category == c) for c in range(C)]
    cat_pos = np.full(J, -1, dtype=np.int64)
    for c in range(C):
        cat_pos[cat_items[c]] = np.arange(len(cat_items[c]))
    burst_by_gc: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for j, s, g in bursts:
        burst_by_gc.setdefault((int(g), int(item_category[j])), []).append((int(j), int(s)))

    user_arr, item_arr, ts_arr, dwell_arr = [], [], [], []
    for u in range(I):
        g = int(user_cluster[u])
        n_ev = max(1, int(gen.poisson(cfg.events_per_user)))
        times = np.sort(gen.integers(0, cfg.horizon, size=n_ev))
        cats = gen.choice(C, size=n_ev, p=pref[g])
        for t, c in zip(times.tolist(), cats.tolist()):
            pool = cat_items[c]
            w = base_pop[pool].copy()
            for j, s in burst_by_gc.get((g, c), ()):
                if t >= s:
                    w[cat_pos[j]] *= 1.0 + cfg.burst_mult * math.exp(-(t - s) / cfg.burst_decay)
            j = int(pool[gen.choice(len(pool), p=w / w.sum())])
            user_arr.append(u)
            item_arr.append(j)
            ts_arr.append(t)
            dwell_arr.append(int(gen.integers(5, 120)))

    stream = EventStream([f"u{i}" for i in range(I)], [f"i{j}" for j in range(J)],
                         user_arr, item_arr, ts_arr, dwell_arr)
    return stream, SynthLabels(user_cluster, item_category, bursts)


def write_labels(labels: SynthLabels, path, header: str | None = None) -> None:
    """Single labels file with three sections: users, items, bursts."""
    with open(path, "w", encoding="utf-8") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        f.write("# section: users\nuser,cluster\n")
        for u, g in enumerate(labels.user_cluster):
            f.write(f"{u},{g}\n")
        f.write("# section: items\nitem,category\n")
        for j, c in enumerate(labels.item_category):
            f.write(f"{j},{c}\n")
        f.write("# section: bursts\nitem,burst_start,burst_cluster\n")
        for j, s, g in labels.bursts:
            f.write(f"{j},{s},{g}\n")
