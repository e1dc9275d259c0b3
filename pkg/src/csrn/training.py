"""Ranking losses, negative sampling, reverse-mode gradients over the fixed
model graph, RMSprop with clipping and decay, and the training loop.

Gradients are accumulated by hand against the graph defined in `model`; there
is no general autodiff here, every backward function mirrors one forward
block.  `finite_difference_check` verifies the whole chain against central
differences on a small fixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model, numerics
from .coread import CoReadNetwork
from .corpus import EventStream
from .embeddings import EmbeddingTable

LOG_EPS = 1e-12
RMS_EPS = 1e-8
RMS_RHO = 0.9


class PoolExhaustedError(RuntimeError):
    """Not enough eligible items to sample negatives for a user."""


class NumericalError(RuntimeError):
    """A non-finite loss; carries the offending in-batch example index."""

    def __init__(self, example_index: int, message: str):
        super().__init__(message)
        self.example_index = example_index


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return model._sigmoid(np.asarray(x, dtype=np.float64))


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def loss(kind: str, r: float, r_neg: np.ndarray, score_reg: float) -> float:
    """Ranking loss of one example given positive score r and negative scores.

    Negatives are weighted by their own softmax s_j, so the hardest negatives
    dominate; score_reg scales the penalty that damps negative magnitudes.
    """
    value, _, _ = loss_with_grad(kind, r, r_neg, score_reg)
    return value


def loss_with_grad(kind: str, r: float, r_neg: np.ndarray, score_reg: float):
    """Returns (loss, dloss/dr, dloss/dr_neg)."""
    r_neg = np.asarray(r_neg, dtype=np.float64)
    if r_neg.size == 0:
        raise ValueError("at least one negative score required")
    s = _softmax(r_neg)
    lam = score_reg
    if kind == "top1max":
        sig_d = _sigmoid(r_neg - r)
        sig_q = _sigmoid(r_neg ** 2)
        t = sig_d + lam * sig_q
        value = float(np.sum(s * t))
        dr = float(-np.sum(s * sig_d * (1.0 - sig_d)))
        dneg = (s * (t - value)
                + s * (sig_d * (1.0 - sig_d)
                       + 2.0 * lam * r_neg * sig_q * (1.0 - sig_q)))
        return value, dr, dneg
    if kind == "bprmax":
        sig = _sigmoid(r - r_neg)
        A = float(np.sum(s * sig))
        B = float(np.sum(s * r_neg ** 2))
        value = -math.log(A + LOG_EPS) + lam * B
        dr = float(-np.sum(s * sig * (1.0 - sig)) / (A + LOG_EPS))
        dA = s * (sig - A) - s * sig * (1.0 - sig)
        dB = s * (r_neg ** 2 - B) + 2.0 * s * r_neg
        dneg = -dA / (A + LOG_EPS) + lam * dB
        return value, dr, dneg
    if kind == "xe":
        allscores = np.concatenate([[r], r_neg])
        m = np.max(allscores)
        lse = m + math.log(np.sum(np.exp(allscores - m)))
        value = lse - r
        p = np.exp(allscores - lse)
        return value, float(p[0] - 1.0), p[1:]
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class LossConfig:
    """Training configuration; every field has a CLI flag."""

    kind: str = "bprmax"                # top1max | bprmax | xe
    score_reg: float = 1.0
    n_negatives: int = 32
    batch_size: int = 256
    learning_rate: float = 1e-4
    decay_factor: float = 0.95
    decay_interval: int = 1000
    clip_norm: float = 5.0
    weight_decay: float = 1e-5
    dropout_input: float = 0.15
    dropout_decoder: float = 0.2
    epochs: int = 5
    seed: int = 0
    seq_len: int = 20
    neg_pool_window: int = 86400        # trailing seconds for the negative pool
    uniform_negatives: bool = False
    max_examples_per_epoch: int = 0     # 0 = use all
    max_eval_clicks: int = 2000
    eval_negatives: int = 99
    patience: int = 0                   # 0 disables early stopping
    neighbor_off: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("score_reg", "learning_rate", "weight_decay",
                     "dropout_input", "dropout_decoder"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kind not in ("top1max", "bprmax", "xe"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


# ---------------------------------------------------------------------------
# Example assembly and negative sampling
# ---------------------------------------------------------------------------

class UserHistory:
    """Merged per-user event timelines used as model context.

    Built from streams in chronological order; queries only ever return
    events strictly before the requested timestamp.
    """

    def __init__(self, streams: list[EventStream]):
        if not streams:
            raise ValueError("at least one stream required")
        self.n_users = streams[0].n_users
        self.items: list[np.ndarray] = []
        self.ts: list[np.ndarray] = []
        for u in range(self.n_users):
            its, tss = [], []
            for s in streams:
                i, t = s.user_events(u)
                its.append(i)
                tss.append(t)
            it = np.concatenate(its)
            t = np.concatenate(tss)
            order = np.argsort(t, kind="stable")
            self.items.append(it[order])
            self.ts.append(t[order])
        self._interacted = [np.unique(i) for i in self.items]

    def recent_items(self, u: int, t: int, L: int) -> np.ndarray:
        """Up to L item indices clicked by u strictly before t, oldest first."""
        hi = np.searchsorted(self.ts[u], t, side="left")
        return self.items[u][max(0, hi - L):hi]

    def interacted(self, u: int) -> np.ndarray:
        return self._interacted[u]

    def interacted_before(self, u: int, t: int) -> np.ndarray:
        hi = np.searchsorted(self.ts[u], t, side="left")
        return np.unique(self.items[u][:hi])


@dataclass(frozen=True)
class TrainExample:
    user: int
    ts: int
    seq: np.ndarray     # up to L input item indices, oldest first
    pos: int


def build_examples(train: EventStream, history: UserHistory, L: int,
                   covered: np.ndarray | None = None):
    """One example per train click whose item is new to the user.

    Clicks whose positive lacks an embedding are dropped and counted.
    Returns (examples, n_dropped_uncovered).
    """
    examples: list[TrainExample] = []
    dropped = 0
    for u in range(train.n_users):
        items, ts = train.user_events(u)
        seen: set[int] = set(history.interacted_before(u, ts[0]).tolist()) if len(ts) else set()
        for j, t in zip(items.tolist(), ts.tolist()):
            if j in seen:
                continue
            seen.add(j)
            if covered is not None and not covered[j]:
                dropped += 1
                continue
            examples.append(TrainExample(u, t, history.recent_items(u, t, L), j))
    return examples, dropped


class NegativePool:
    """Time-windowed, popularity-weighted pool of recently clicked items."""

    def __init__(self, streams: list[EventStream], window: int,
                 covered: np.ndarray | None = None):
        ts = np.concatenate([s.ts for s in streams])
        item = np.concatenate([s.item for s in streams])
        order = np.argsort(ts, kind="stable")
        self.ts = ts[order]
        self.item = item[order]
        self.window = window
        self.covered = covered

    def window_counts(self, t: int):
        """(items, click counts) for clicks in [t - window, t)."""
        lo = np.searchsorted(self.ts, t - self.window, side="left")
        hi = np.searchsorted(self.ts, t, side="left")
        return np.unique(self.item[lo:hi], return_counts=True)

    def eligible(self, t: int, exclude: np.ndarray):
        items, counts = self.window_counts(t)
        mask = ~np.isin(items, exclude)
        if self.covered is not None:
            mask &= self.covered[items]
        return items[mask], counts[mask]


def sample_negatives(items: np.ndarray, weights: np.ndarray, count: int,
                     gen: np.random.Generator, user: int = -1,
                     uniform: bool = False) -> np.ndarray:
    """Draw `count` distinct items, proportionally to weights unless uniform.

    Weighted sampling without replacement via the Gumbel top-k trick, so a
    single vectorized pass stays deterministic under the generator state.
    """
    if len(items) < count:
        raise PoolExhaustedError(
            f"user {user}: only {len(items)} eligible negatives, need {count}")
    g = gen.gumbel(size=len(items))
    if uniform:
        keys = g
    else:
        keys = np.log(weights.astype(np.float64)) + g
    top = np.argpartition(-keys, count - 1)[:count]
    return items[top]


# ---------------------------------------------------------------------------
# Batched forward + backward over the full graph
# ---------------------------------------------------------------------------

def _assemble_sequences(keys: np.ndarray, history: UserHistory,
                        emb: EmbeddingTable, L: int):
    """Embed the last-L context of each unique (user, timestamp) key."""
    S = len(keys)
    X = np.zeros((S, L, emb.dim))
    lengths = np.zeros(S, dtype=np.int64)
    for s, (u, t) in enumerate(keys):
        seq = history.recent_items(int(u), int(t), L)
        if len(seq):
            X[s, :len(seq)] = emb.vectors[seq]
            lengths[s] = len(seq)
    return X, lengths


def _edge_features(net: CoReadNetwork, users: np.ndarray) -> np.ndarray:
    ui = net.U[users][:, None, :]                      # B x 1 x T
    uk = net.U[net.neighbors[users]]                   # B x N x T
    return np.concatenate([np.broadcast_to(ui, uk.shape), uk, ui * uk], axis=2)


def batch_scores(users, ts, cand_items, params, net, emb, history,
                 neighbor_off=False, dropout_rng=None, cfg=None):
    """Forward pass for a batch of (user, timestamp, candidate list) queries.

    Returns (scores (B, K), cache) where cache is consumed by
    `batch_backward`; dropout is active only when dropout_rng is given.
    """
    users = np.asarray(users, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    cand_items = np.asarray(cand_items, dtype=np.int64)
    B = len(users)
    L = params.dims.seq_len

    if neighbor_off:
        keys = np.stack([users, ts], axis=1)
    else:
        nbr = net.neighbors[users]                     # B x N
        N = nbr.shape[1]
        keys = np.empty((B * (1 + N), 2), dtype=np.int64)
        keys[0::N + 1, 0] = users
        keys[0::N + 1, 1] = ts
        block = np.arange(B) * (N + 1)
        for n in range(N):
            keys[block + 1 + n, 0] = nbr[:, n]
            keys[block + 1 + n, 1] = ts
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    X, lengths = _assemble_sequences(uniq, history, emb, L)

    in_mask = None
    if dropout_rng is not None and cfg is not None and cfg.dropout_input > 0:
        keep = 1.0 - cfg.dropout_input
        in_mask = (dropout_rng.random(X.shape) < keep) / keep
        X = X * in_mask
    h_all, gru_cache = model.gru_forward_batch(X, lengths, params)

    if neighbor_off:
        h_i = h_all[inverse]
        att_cache = None
        n_vec = np.zeros((B, params.dims.d_n))
        E = None
        inv_t, inv_n = inverse, None
    else:
        inv = inverse.reshape(B, N + 1)
        inv_t = inv[:, 0]
        inv_n = inv[:, 1:]
        h_i = h_all[inv_t]
        Hk = h_all[inv_n.ravel()].reshape(B, N, -1)
        E = _edge_features(net, users)
        n_vec, att_cache = model.attend_batch(h_i, Hk, E, params)

    mh = mn = None
    if dropout_rng is not None and cfg is not None and cfg.dropout_decoder > 0:
        keep = 1.0 - cfg.dropout_decoder
        mh = (dropout_rng.random(h_i.shape) < keep) / keep
        mn = (dropout_rng.random(n_vec.shape) < keep) / keep
    h_dec = h_i * mh if mh is not None else h_i
    n_dec = n_vec * mn if mn is not None else n_vec
    q, dec_cache = model.decode_batch(h_dec, n_dec, params)
    Vc = emb.vectors[cand_items]                       # B x K x d_v
    scores = np.einsum("bkd,bd->bk", Vc, q)
    cache = dict(gru_cache=gru_cache, att_cache=att_cache, dec_cache=dec_cache,
                 Vc=Vc, inv_t=inv_t, inv_n=inv_n, n_unique=len(uniq),
                 mh=mh, mn=mn, neighbor_off=neighbor_off)
    return scores, cache


def batch_backward(dscores: np.ndarray, cache, params: model.ModelParams,
                   grads: dict) -> None:
    """Accumulate parameter gradients for dL/dscores through the whole graph."""
    dq = np.einsum("bk,bkd->bd", dscores, cache["Vc"])
    dh_dec, dn_dec = model.decode_backward_batch(dq, cache["dec_cache"], params, grads)
    dh_i = dh_dec * cache["mh"] if cache["mh"] is not None else dh_dec
    dn = dn_dec * cache["mn"] if cache["mn"] is not None else dn_dec
    dh_all = np.zeros((cache["n_unique"], params.dims.d_h))
    if cache["neighbor_off"]:
        np.add.at(dh_all, cache["inv_t"], dh_i)
    else:
        dh_i_att, dHk = model.attend_backward_batch(dn, cache["att_cache"], params, grads)
        dh_i = dh_i + dh_i_att
        np.add.at(dh_all, cache["inv_t"], dh_i)
        np.add.at(dh_all, cache["inv_n"].ravel(), dHk.reshape(-1, params.dims.d_h))
    model.gru_backward_batch(dh_all, cache["gru_cache"], params, grads)


def backward(batch, negatives: np.ndarray, params: model.ModelParams,
             cfg: LossConfig, net: CoReadNetwork, emb: EmbeddingTable,
             history: UserHistory, dropout_rng=None):
    """Mean batch loss plus weight decay, and gradients for every block.

    negatives: (B, n_neg) item indices, one row per example.
    """
    users = np.array([ex.user for ex in batch], dtype=np.int64)
    ts = np.array([ex.ts for ex in batch], dtype=np.int64)
    pos = np.array([ex.pos for ex in batch], dtype=np.int64)
    cand = np.concatenate([pos[:, None], negatives], axis=1)
    scores, cache = batch_scores(users, ts, cand, params, net, emb, history,
                                 neighbor_off=cfg.neighbor_off,
                                 dropout_rng=dropout_rng, cfg=cfg)
    B = len(batch)
    total = 0.0
    dscores = np.zeros_like(scores)
    for b in range(B):
        value, dr, dneg = loss_with_grad(cfg.kind, scores[b, 0], scores[b, 1:],
                                         cfg.score_reg)
        if not np.isfinite(value):
            raise NumericalError(b, f"non-finite loss for example {b} "
                                    f"(user {batch[b].user}, t {batch[b].ts})")
        total += value
        dscores[b, 0] = dr / B
        dscores[b, 1:] = dneg / B
    grads = params.zeros_like()
    batch_backward(dscores, cache, params, grads)
    if cfg.weight_decay > 0:
        for k in grads:
            grads[k] += cfg.weight_decay * params.blocks[k]
    return total / B, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    cache: dict[str, np.ndarray]
    step: int
    lr: float

    @classmethod
    def fresh(cls, params: model.ModelParams, cfg: LossConfig) -> "OptimizerState":
        return cls(params.zeros_like(), 0, cfg.learning_rate)


def clip_global_norm(grads: dict, clip: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `clip`."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip > 0 and total > clip:
        scale = clip / total
        for g in grads.values():
            g *= scale
    return total


def optimizer_step(params: model.ModelParams, grads: dict,
                   state: OptimizerState, cfg: LossConfig) -> None:
    """RMSprop update with global-norm clipping and stepwise lr decay."""
    clip_global_norm(grads, cfg.clip_norm)
    for k, g in grads.items():
        c = state.cache[k]
        c *= RMS_RHO
        c += (1.0 - RMS_RHO) * g * g
        params.blocks[k] -= state.lr * g / (np.sqrt(c) + RMS_EPS)
    state.step += 1
    if cfg.decay_interval > 0 and state.step % cfg.decay_interval == 0:
        state.lr *= cfg.decay_factor


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: model.ModelParams
    best_params: model.ModelParams
    state: OptimizerState
    log: list  # rows of (epoch, step, loss, val_hr10, val_mrr, lr)
    best_val_mrr: float
    dropped_uncovered: int


def train(history_stream: EventStream, train_stream: EventStream,
          valid_stream: EventStream, net: CoReadNetwork, emb: EmbeddingTable,
          cfg: LossConfig, dims: model.ModelDims | None = None,
          params: model.ModelParams | None = None) -> TrainResult:
    """Epoch loop with per-epoch validation MRR and best-checkpoint tracking.

    Negatives are redrawn every epoch; all randomness derives from cfg.seed,
    so identical configs give identical logs and parameters.
    """
    from . import evalbench  # deferred: evalbench imports this module

    if params is None:
        if dims is None:
            raise ValueError("either dims or params must be given")
        params = model.init_params(dims, cfg.seed)
    else:
        params = params.copy()
    ctx_train = UserHistory([history_stream, train_stream])
    ctx_valid = UserHistory([history_stream, train_stream, valid_stream])
    examples, dropped = build_examples(train_stream, ctx_train,
                                       params.dims.seq_len, emb.covered)
    if not examples:
        raise ValueError("no training examples after filtering")
    pool = NegativePool([history_stream, train_stream], cfg.neg_pool_window,
                        emb.covered)

    ss = np.random.SeedSequence(cfg.seed)
    gen_shuffle, gen_neg, gen_drop, gen_val = [np.random.default_rng(s)
                                               for s in ss.spawn(4)]
    val_cands = evalbench.freeze_candidates(
        valid_stream, [history_stream, train_stream, valid_stream],
        window=cfg.neg_pool_window, seed=int(gen_val.integers(2 ** 31)),
        covered=emb.covered, max_clicks=cfg.max_eval_clicks,
        uniform=cfg.uniform_negatives, n_negatives=cfg.eval_negatives)

    state = OptimizerState.fresh(params, cfg)
    log: list = []
    best = params.copy()
    best_mrr = -1.0
    stale = 0

    def _validate(p):
        ranks = evalbench.rank_candidates(
            p, net, emb, ctx_valid, val_cands, neighbor_off=cfg.neighbor_off)
        m = evalbench.metrics(ranks, [10])
        return m["hr"][10], m["mrr"]

    hr10, mrr = _validate(params)
    log.append((0, state.step, float("nan"), hr10, mrr, state.lr))
    if mrr > best_mrr:
        best_mrr, best = mrr, params.copy()

    order_base = np.arange(len(examples))
    for epoch in range(1, cfg.epochs + 1):
        order = order_base.copy()
        gen_shuffle.shuffle(order)
        if cfg.max_examples_per_epoch > 0:
            order = order[:cfg.max_examples_per_epoch]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            negs = np.empty((len(batch), cfg.n_negatives), dtype=np.int64)
            for b, ex in enumerate(batch):
                exclude = ctx_train.interacted(ex.user)
                items, counts = pool.eligible(ex.ts, exclude)
                negs[b] = sample_negatives(items, counts, cfg.n_negatives,
                                           gen_neg, user=ex.user,
                                           uniform=cfg.uniform_negatives)
            value, grads = backward(batch, negs, params, cfg, net, emb,
                                    ctx_train, dropout_rng=gen_drop)
            optimizer_step(params, grads, state, cfg)
            epoch_loss += value
            n_batches += 1
        hr10, mrr = _validate(params)
        log.append((epoch, state.step, epoch_loss / max(n_batches, 1),
                    hr10, mrr, state.lr))
        if mrr > best_mrr:
            best_mrr, best = mrr, params.copy()
            stale = 0
        else:
            stale += 1
            if cfg.patience > 0 and stale >= cfg.patience:
                break
    return TrainResult(params, best, state, log, best_mrr, dropped)


def write_log(log, path, header_meta: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header_meta:
            for line in header_meta.splitlines():
                f.write(f"# {line}\n")
        f.write("epoch,step,loss,val_hr10,val_mrr,lr\n")
        for epoch, step, value, hr10, mrr, lr in log:
            f.write(f"{epoch},{step},{value!r},{hr10!r},{mrr!r},{lr!r}\n")


def optimizer_extra_blocks(state: OptimizerState) -> dict:
    blocks = {f"opt.cache.{k}": v for k, v in state.cache.items()}
    blocks["opt.step"] = np.array(float(state.step))
    blocks["opt.lr"] = np.array(state.lr)
    return blocks


def optimizer_state_from_blocks(extra: dict) -> OptimizerState:
    cache = {k[len("opt.cache."):]: v for k, v in extra.items()
             if k.startswith("opt.cache.")}
    return OptimizerState(cache, int(extra["opt.step"]), float(extra["opt.lr"]))


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------

def gradcheck_fixture(seed: int = 7):
    """A 2-example micro-world exercising every parameter path."""
    from .corpus import EventStream

    gen = numerics.rng(seed)
    n_users, n_items = 5, 12
    T = 2
    dims = model.ModelDims(d_v=10, d_h=8, d_e=3 * T, d_c=4, n_heads=2, seq_len=4)
    # every user clicks a few items before t=100
    user, item, ts = [], [], []
    for u in range(n_users):
        for p in range(4):
            user.append(u)
            item.append(int(gen.integers(n_items)))
            ts.append(10 + 5 * p + u)
    stream = EventStream([f"u{i}" for i in range(n_users)],
                         [f"i{j}" for j in range(n_items)],
                         user, item, ts, [-1] * len(user))
    history = UserHistory([stream])
    U = gen.standard_normal((n_users, T)) * 0.5
    sigma = np.array([1.5, 0.7])
    neighbors = np.array([[1, 2, 3], [0, 2, 4], [0, 1, 4], [0, 1, 2], [1, 2, 3]])
    net = CoReadNetwork(U, sigma, neighbors, np.zeros(n_users, bool),
                        N=3, use_tfidf=True, seed=seed)
    emb = EmbeddingTable(dims.d_v, gen.standard_normal((n_items, dims.d_v)) * 0.6,
                         np.ones(n_items, bool))
    params = model.init_params(dims, seed)
    batch = [TrainExample(0, 100, history.recent_items(0, 100, dims.seq_len), 5),
             TrainExample(3, 100, history.recent_items(3, 100, dims.seq_len), 7)]
    negs = np.array([[1, 2, 8, 9], [0, 2, 6, 11]], dtype=np.int64)
    return params, batch, negs, net, emb, history


def finite_difference_check(kind: str, step: float = 1e-5, seed: int = 7,
                            weight_decay: float = 1e-3):
    """Max relative error per parameter block, analytic vs central differences.

    The objective is mean batch loss + (weight_decay / 2) * ||theta||^2, the
    same quantity whose gradient `backward` reports.
    """
    params, batch, negs, net, emb, history = gradcheck_fixture(seed)
    cfg = LossConfig(kind=kind, weight_decay=weight_decay,
                     dropout_input=0.0, dropout_decoder=0.0,
                     seq_len=params.dims.seq_len, n_negatives=negs.shape[1])

    def objective() -> float:
        users = np.array([ex.user for ex in batch])
        ts = np.array([ex.ts for ex in batch])
        cand = np.concatenate([np.array([[ex.pos] for ex in batch]), negs], axis=1)
        scores, _ = batch_scores(users, ts, cand, params, net, emb, history)
        total = sum(loss(kind, scores[b, 0], scores[b, 1:], cfg.score_reg)
                    for b in range(len(batch)))
        reg = 0.5 * weight_decay * sum(float(np.sum(v * v))
                                       for v in params.blocks.values())
        return total / len(batch) + reg

    _, grads = backward(batch, negs, params, cfg, net, emb, history)
    errors: dict[str, float] = {}
    for name, block in params.blocks.items():
        g = grads[name]
        worst = 0.0
        flat = block.ravel()
        gflat = g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = objective()
            flat[idx] = orig - step
            down = objective()
            flat[idx] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[idx]), 1e-6)
            worst = max(worst, abs(fd - gflat[idx]) / denom)
        errors[name] = worst
    return errors
