"""Leave-one-out evaluation: frozen 99-negative candidate sets, HR@K / MRR,
and the classical baselines (popularity, item-kNN, user-kNN, sequence-only).

Every scorer sees only events strictly before the click being judged; ties
are resolved pessimistically (the positive ranks after equal-scored
negatives), so constant scorers get rank 100 rather than a free ride.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import coread, model, numerics, training
from .corpus import EventStream, interaction_matrix
from .embeddings import EmbeddingTable

N_NEGATIVES = 99


@dataclass
class EvalCandidateSet:
    users: np.ndarray    # C
    ts: np.ndarray       # C
    pos: np.ndarray      # C
    negs: np.ndarray     # C x 99
    seed: int
    rules: str

    def __len__(self) -> int:
        return len(self.users)


def freeze_candidates(test: EventStream, pool_streams: list[EventStream],
                      window: int, seed: int,
                      covered: np.ndarray | None = None,
                      max_clicks: int = 0, uniform: bool = False,
                      n_negatives: int = N_NEGATIVES) -> EvalCandidateSet:
    """Draw the shared negative sets once, with the training sampling rules.

    Per click: negatives come from items clicked in the trailing window,
    popularity-proportional, excluding everything the user ever interacted
    with and uncovered items.  Clicks re-reading an old item or targeting an
    uncovered item are skipped.  Deterministic given the seed.
    """
    gen = numerics.rng(seed)
    pool = training.NegativePool(pool_streams, window, covered)
    ctx = training.UserHistory(pool_streams)
    clicks = []
    for u in range(test.n_users):
        items, ts = test.user_events(u)
        seen = set(ctx.interacted_before(u, ts[0]).tolist()) if len(ts) else set()
        for j, t in zip(items.tolist(), ts.tolist()):
            if j in seen:
                continue
            seen.add(j)
            if covered is not None and not covered[j]:
                continue
            clicks.append((u, t, j))
    if max_clicks > 0 and len(clicks) > max_clicks:
        pick = gen.choice(len(clicks), size=max_clicks, replace=False)
        clicks = [clicks[i] for i in np.sort(pick)]
    users = np.array([c[0] for c in clicks], dtype=np.int64)
    ts = np.array([c[1] for c in clicks], dtype=np.int64)
    pos = np.array([c[2] for c in clicks], dtype=np.int64)
    negs = np.empty((len(clicks), n_negatives), dtype=np.int64)
    for i, (u, t, j) in enumerate(clicks):
        exclude = np.union1d(ctx.interacted(u), [j])
        items, counts = pool.eligible(t, exclude)
        try:
            negs[i] = training.sample_negatives(items, counts, n_negatives,
                                                gen, user=u, uniform=uniform)
        except training.PoolExhaustedError as e:
            raise training.PoolExhaustedError(
                f"click (user {u}, t {t}, item {j}): {e}") from None
    rules = f"window={window} uniform={uniform} n_neg={n_negatives}"
    return EvalCandidateSet(users, ts, pos, negs, seed, rules)


def save_candidates(cands: EvalCandidateSet, path, config_hash: int = 0) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# seed={cands.seed} rules={cands.rules} config_hash={config_hash:016x}\n")
        f.write("user,ts,positive," +
                ",".join(f"neg{i + 1}" for i in range(cands.negs.shape[1])) + "\n")
        for i in range(len(cands)):
            row = [str(cands.users[i]), str(cands.ts[i]), str(cands.pos[i])]
            row += [str(x) for x in cands.negs[i]]
            f.write(",".join(row) + "\n")


def load_candidates(path) -> EvalCandidateSet:
    with open(path, "r", encoding="utf-8") as f:
        meta = f.readline().strip()
        if not meta.startswith("# seed="):
            raise ValueError("candidates file missing metadata header")
        seed = int(meta.split()[1].split("=")[1])
        rules = meta.split("rules=", 1)[1].rsplit(" config_hash=", 1)[0]
        f.readline()  # column header
        rows = [line.strip().split(",") for line in f if line.strip()]
    data = np.array([[int(x) for x in r] for r in rows], dtype=np.int64)
    return EvalCandidateSet(data[:, 0], data[:, 1], data[:, 2], data[:, 3:],
                            seed, rules)


def metrics(ranks: np.ndarray, Ks: list[int]) -> dict:
    """HR@K = share of ranks <= K; MRR = mean of 1/rank."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("metrics require at least one rank")
    return {
        "hr": {K: float(np.mean(ranks <= K)) for K in Ks},
        "mrr": float(np.mean(1.0 / ranks)),
        "n_clicks": int(ranks.size),
    }


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """Pessimistic rank of column 0 among all columns (ties count against it)."""
    pos = scores[:, :1]
    return 1 + np.sum(scores[:, 1:] >= pos, axis=1)


def evaluate(scorer, cands: EvalCandidateSet, Ks=(1, 10, 20),
             chunk: int = 512):
    """Score every candidate set and return (metrics dict, per-click ranks).

    The scorer must expose score_batch(users, ts, items) -> (B, K) and may
    only consult events strictly before each click's timestamp.
    """
    C = len(cands)
    items = np.concatenate([cands.pos[:, None], cands.negs], axis=1)
    ranks = np.empty(C, dtype=np.int64)
    for lo in range(0, C, chunk):
        hi = min(lo + chunk, C)
        s = scorer.score_batch(cands.users[lo:hi], cands.ts[lo:hi], items[lo:hi])
        ranks[lo:hi] = ranks_from_scores(np.asarray(s, dtype=np.float64))
    return metrics(ranks, list(Ks)), ranks


def rank_candidates(params: model.ModelParams, net: coread.CoReadNetwork,
                    emb: EmbeddingTable, ctx: training.UserHistory,
                    cands: EvalCandidateSet, neighbor_off: bool = False,
                    chunk: int = 512) -> np.ndarray:
    """Per-click ranks under the neural scorer (inference mode, no dropout)."""
    scorer = ModelScorer(params, net, emb, ctx, neighbor_off)
    _, ranks = evaluate(scorer, cands, chunk=chunk)
    return ranks


def write_metrics(metrics_dict: dict, model_name: str, path) -> None:
    out = {"model": model_name}
    out.update(metrics_dict)
    out["hr"] = {str(k): v for k, v in metrics_dict["hr"].items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")


def write_ranks(ranks: np.ndarray, path, header_meta: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header_meta:
            for line in header_meta.splitlines():
                f.write(f"# {line}\n")
        f.write("click_id,rank\n")
        for i, r in enumerate(ranks):
            f.write(f"{i},{int(r)}\n")


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

class ModelScorer:
    """Neural scorer over frozen parameters; thread-safe for reads."""

    def __init__(self, params, net, emb, ctx: training.UserHistory,
                 neighbor_off: bool = False):
        self.params = params
        self.net = net
        self.emb = emb
        self.ctx = ctx
        self.neighbor_off = neighbor_off

    def score_batch(self, users, ts, items):
        scores, _ = training.batch_scores(users, ts, items, self.params,
                                          self.net, self.emb, self.ctx,
                                          neighbor_off=self.neighbor_off)
        return scores


class PopScorer:
    """Items ranked by their train-window click counts."""

    def __init__(self, train: EventStream):
        self.counts = np.bincount(train.item, minlength=train.n_items).astype(np.float64)

    def score_batch(self, users, ts, items):
        return self.counts[np.asarray(items)]


class ItemCFScorer:
    """Sum of embedding cosines between the candidate and the user's last-L
    items, restricted to the candidate's top-M cosine neighbors."""

    def __init__(self, emb: EmbeddingTable, ctx: training.UserHistory,
                 seq_len: int = 20, top_m: int = 50):
        if not np.any(emb.covered):
            raise ValueError("ItemCF requires embeddings")
        self.ctx = ctx
        self.seq_len = seq_len
        norms = np.linalg.norm(emb.vectors, axis=1)
        norms[norms == 0] = 1.0
        Vn = emb.vectors / norms[:, None]
        self.cos = Vn @ Vn.T
        m = min(top_m, self.cos.shape[1])
        # m-th largest cosine per row is the admission threshold
        self.thresh = np.partition(self.cos, -m, axis=1)[:, -m]

    def score_batch(self, users, ts, items):
        items = np.asarray(items)
        out = np.zeros(items.shape)
        for b, (u, t) in enumerate(zip(np.asarray(users), np.asarray(ts))):
            recent = self.ctx.recent_items(int(u), int(t), self.seq_len)
            if len(recent) == 0:
                continue
            sims = self.cos[items[b]][:, recent]              # K x len(recent)
            keep = sims >= self.thresh[items[b]][:, None]
            out[b] = np.sum(sims * keep, axis=1)
        return out


class UserCFScorer:
    """Classical user kNN: cosine over idf-weighted history rows; a candidate
    scores by how many similar users read it before the click, weighted."""

    def __init__(self, history: EventStream, ctx: training.UserHistory,
                 top_m: int = 50):
        R = interaction_matrix(history)
        M = numerics.tfidf(R).toarray()
        norms = np.linalg.norm(M, axis=1)
        norms[norms == 0] = 1.0
        sims = (M / norms[:, None]) @ (M / norms[:, None]).T
        np.fill_diagonal(sims, -np.inf)
        I = sims.shape[0]
        m = min(top_m, I - 1)
        idx = np.arange(I)
        self.neighbors = np.empty((I, m), dtype=np.int64)
        self.sims = np.empty((I, m))
        for i in range(I):
            order = np.lexsort((idx, -sims[i]))[:m]
            self.neighbors[i] = order
            self.sims[i] = sims[i][order]
        self.ctx = ctx
        self._first_read = None

    def _first_read_ts(self, u: int) -> dict:
        if self._first_read is None:
            self._first_read = [None] * self.ctx.n_users
        if self._first_read[u] is None:
            d: dict = {}
            for j, t in zip(self.ctx.items[u].tolist(), self.ctx.ts[u].tolist()):
                if j not in d:
                    d[j] = t
            self._first_read[u] = d
        return self._first_read[u]

    def score_batch(self, users, ts, items):
        items = np.asarray(items)
        out = np.zeros(items.shape)
        for b, (u, t) in enumerate(zip(np.asarray(users), np.asarray(ts))):
            for k, s in zip(self.neighbors[int(u)], self.sims[int(u)]):
                if s <= 0:
                    continue
                fr = self._first_read_ts(int(k))
                for c, j in enumerate(items[b]):
                    tj = fr.get(int(j))
                    if tj is not None and tj < t:
                        out[b, c] += s
        return out
