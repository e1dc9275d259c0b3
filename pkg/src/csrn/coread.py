"""Directed co-reading network: SVD user factors, top-N neighbor selection,
edge features, serialization, and network analytics.

Edge (i, k) means user k is among the top-N users most similar to i under the
bilinear form u_i diag(sigma) u_k^T; its feature vector is
concat(u_i, u_k, u_i * u_k), length 3T.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numerics
from .corpus import EmptyCorpusError, EventStream, interaction_matrix

NETWORK_MAGIC = b"CRN1"


def similarity(u_i: np.ndarray, u_k: np.ndarray, sigma: np.ndarray) -> float:
    """Bilinear similarity sum_t u_i[t] * sigma[t] * u_k[t]."""
    u_i, u_k, sigma = np.asarray(u_i), np.asarray(u_k), np.asarray(sigma)
    if not (u_i.shape == u_k.shape == sigma.shape):
        raise ValueError("similarity inputs must have equal length")
    return float(np.sum(u_i * sigma * u_k))


@dataclass
class CoReadNetwork:
    U: np.ndarray            # I x T user factors
    sigma: np.ndarray        # T singular values
    neighbors: np.ndarray    # I x min(N, I-1) neighbor ids, descending similarity
    anchor: np.ndarray       # I bools: True if user had no history and got popularity anchors
    N: int
    use_tfidf: bool
    seed: int
    selection: str = "similarity"  # or "random"

    @property
    def n_users(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def edge_features(self, i: int, ks) -> np.ndarray:
        """e_ik rows for target i and neighbor ids ks, shape (len(ks), 3T)."""
        ks = np.asarray(ks, dtype=np.int64)
        ui = np.broadcast_to(self.U[i], (len(ks), self.rank))
        uk = self.U[ks]
        return np.concatenate([ui, uk, ui * uk], axis=1)

    def out_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_users, dtype=np.int64)
        np.add.at(deg, self.neighbors.ravel(), 1)
        return deg


def build_network(history: EventStream, T: int, N: int, use_tfidf: bool = True,
                  seed: int = 0, selection: str = "similarity") -> CoReadNetwork:
    """Factor the history window and keep each user's top-N most similar users.

    Similarity ties break toward the lower user index.  Users without history
    events get a zero factor row and the N most active users as neighbors
    (popularity anchor), so every user has a defined neighbor set.
    `selection="random"` keeps the factors but draws neighbors uniformly, for
    the neighbor-selection ablation.
    """
    if len(history) == 0:
        raise EmptyCorpusError("cannot build a co-reading network from an empty history")
    if selection not in ("similarity", "random"):
        raise ValueError(f"unknown selection {selection!r}")
    R = interaction_matrix(history)
    I = R.rows
    if not (1 <= T <= min(R.rows, R.cols)):
        raise ValueError(f"rank T={T} out of range for {R.rows}x{R.cols} history")
    M = numerics.tfidf(R) if use_tfidf else R.to_csr()
    factors = numerics.truncated_svd(M, T, seed, keep_v=False)
    U = factors.U.copy()
    event_counts = np.diff(history.offsets)
    inactive = event_counts == 0
    U[inactive] = 0.0

    n_eff = min(N, I - 1)
    if n_eff < 1:
        raise ValueError("need at least 2 users to build a network")
    neighbors = np.empty((I, n_eff), dtype=np.int64)
    anchor = inactive.copy()

    if selection == "random":
        gen = numerics.rng(seed)
        others = np.arange(I)
        for i in range(I):
            pool = np.delete(others, i)
            neighbors[i] = gen.choice(pool, size=n_eff, replace=False)
        anchor[:] = False
        return CoReadNetwork(U, factors.sigma, neighbors, anchor, N, use_tfidf, seed, selection)

    S = (U * factors.sigma) @ U.T
    idx = np.arange(I)
    # ties by lower user index; self excluded via -inf
    for i in range(I):
        row = S[i].copy()
        row[i] = -np.inf
        order = np.lexsort((idx, -row))
        neighbors[i] = order[:n_eff]

    if np.any(anchor):
        # most active users overall, ties toward the lower index
        pop_order = np.lexsort((idx, -event_counts))
        for i in np.flatnonzero(anchor):
            anchors = pop_order[pop_order != i][:n_eff]
            neighbors[i] = anchors
    return CoReadNetwork(U, factors.sigma, neighbors, anchor, N, use_tfidf, seed, selection)


@dataclass
class DegreeStats:
    out_degrees: np.ndarray
    degrees: np.ndarray     # distinct out-degree values, ascending
    counts: np.ndarray      # node count per value
    n_positive: int
    max_degree: int


def degree_stats(net: CoReadNetwork) -> DegreeStats:
    """Out-degree histogram: how many users cite each node as a neighbor."""
    deg = net.out_degrees()
    degrees, counts = np.unique(deg, return_counts=True)
    return DegreeStats(deg, degrees, counts, int(np.sum(deg > 0)), int(deg.max()))


def _out_adjacency(net: CoReadNetwork):
    """out_edges[k] = users who keep k as a neighbor (edges k -> i), CSR-style."""
    I = net.n_users
    src = net.neighbors.ravel()
    dst = np.repeat(np.arange(I), net.neighbors.shape[1])
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    indptr = np.zeros(I + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return np.cumsum(indptr), dst


def reachability_within(net: CoReadNetwork, max_steps: int) -> np.ndarray:
    """Fraction of ordered (source, other-node) pairs reachable in <= s steps.

    Sources are the nodes with out-degree > 0; the denominator is
    |sources| * (I - 1).  The fraction is non-decreasing in s.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    I = net.n_users
    indptr, dst = _out_adjacency(net)
    sources = np.flatnonzero(np.diff(indptr) > 0)
    if len(sources) == 0:
        return np.zeros(max_steps)
    reached_per_step = np.zeros(max_steps, dtype=np.int64)
    for s in sources:
        visited = np.zeros(I, dtype=bool)
        visited[s] = True
        frontier = np.array([s], dtype=np.int64)
        for step in range(max_steps):
            if len(frontier):
                nxt = np.concatenate([dst[indptr[v]:indptr[v + 1]] for v in frontier])
                nxt = np.unique(nxt)
                nxt = nxt[~visited[nxt]]
                visited[nxt] = True
                frontier = nxt
            reached_per_step[step] += visited.sum() - 1  # exclude the source itself
    return reached_per_step / (len(sources) * (I - 1))


@dataclass
class PriorReadStats:
    counts: np.ndarray        # counts[c] = clicks with exactly c prior-reading neighbors
    n_clicks: int
    share_ge1: float
    share_ge5: float

    def shares(self) -> np.ndarray:
        return self.counts / max(self.n_clicks, 1)


def prior_read_stats(net: CoReadNetwork, train: EventStream,
                     neighbors: np.ndarray | None = None) -> PriorReadStats:
    """For each train click, how many of the user's neighbors read the item
    strictly earlier.  Simultaneous timestamps do not count.

    `neighbors` overrides the network's lists (used for permuted controls).
    """
    nbrs = net.neighbors if neighbors is None else neighbors
    first_read: list[dict] = []
    for u in range(train.n_users):
        items, ts = train.user_events(u)
        d: dict = {}
        for j, t in zip(items.tolist(), ts.tolist()):
            if j not in d:
                d[j] = t
        first_read.append(d)
    max_c = nbrs.shape[1]
    counts = np.zeros(max_c + 1, dtype=np.int64)
    for i in range(train.n_users):
        items, ts = train.user_events(i)
        nl = nbrs[i].tolist()
        for j, t in zip(items.tolist(), ts.tolist()):
            c = 0
            for k in nl:
                tk = first_read[k].get(j)
                if tk is not None and tk < t:
                    c += 1
            counts[c] += 1
    n = int(counts.sum())
    ge1 = float(counts[1:].sum() / n) if n else 0.0
    ge5 = float(counts[5:].sum() / n) if n and max_c >= 5 else 0.0
    return PriorReadStats(counts, n, ge1, ge5)


def save_network(net: CoReadNetwork, path, config_hash: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(NETWORK_MAGIC)
        f.write(struct.pack("<QQQBBqQ", net.n_users, net.rank, net.N,
                            int(net.use_tfidf), int(net.selection == "random"),
                            net.seed, config_hash))
        numerics.save_matrix(f, net.U)
        numerics.save_matrix(f, net.sigma.reshape(1, -1))
        f.write(struct.pack("<Q", net.neighbors.shape[1]))
        f.write(net.neighbors.astype("<i8").tobytes())
        f.write(net.anchor.astype(np.uint8).tobytes())


def load_network(path) -> CoReadNetwork:
    with open(path, "rb") as f:
        if f.read(4) != NETWORK_MAGIC:
            raise ValueError(f"not a co-reading network file: {path}")
        I, T, N, use_tfidf, random_sel, seed, _ = struct.unpack("<QQQBBqQ", f.read(42))
        U = numerics.load_matrix(f)
        sigma = numerics.load_matrix(f).ravel()
        (n_eff,) = struct.unpack("<Q", f.read(8))
        neighbors = np.frombuffer(f.read(I * n_eff * 8), dtype="<i8").reshape(I, n_eff).copy()
        anchor = np.frombuffer(f.read(I), dtype=np.uint8).astype(bool)
    return CoReadNetwork(U, sigma, neighbors, anchor, int(N), bool(use_tfidf),
                         int(seed), "random" if random_sel else "similarity")


def export_adjacency(net: CoReadNetwork, path, header: str | None = None) -> None:
    """CSV edge list (neighbor -> target) for external visualization."""
    with open(path, "w", encoding="utf-8") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        f.write("source,target\n")
        for i in range(net.n_users):
            for k in net.neighbors[i]:
                f.write(f"{k},{i}\n")
