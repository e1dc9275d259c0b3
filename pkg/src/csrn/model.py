"""Forward computation of the collaborative sequential recommender.

A GRU encodes each user's recent clicked-item embeddings into a hidden state.
For a target user, every neighbor's hidden state is filtered through a gated
edge transform, weighted by multi-head attention, and summarized into a
neighbor vector; the decoder maps (hidden state, neighbor summary) into the
item-embedding space and candidates are scored by inner product.

All batched functions return a cache consumed by the matching backward pass
in `training`; parameters live in a flat name -> ndarray dict so gradient
bookkeeping stays trivial.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics

CHECKPOINT_MAGIC = b"CSN1"
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelDims:
    d_v: int          # item embedding size
    d_h: int          # GRU hidden size
    d_e: int          # edge feature size (3 * network rank)
    d_c: int          # per-head channel width
    n_heads: int
    seq_len: int      # max input events per encoding (L)

    @property
    def d_n(self) -> int:
        return self.n_heads * self.d_c


@dataclass
class ModelParams:
    dims: ModelDims
    seed: int
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.blocks.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.seed, {k: v.copy() for k, v in self.blocks.items()})


@dataclass
class NeighborContext:
    neighbor_ids: np.ndarray
    hidden: np.ndarray    # N x d_h neighbor hidden states
    edges: np.ndarray     # N x d_e edge features


def _glorot(gen, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-a, a, size=shape)


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Variance-preserving uniform init for weights, zeros for biases."""
    gen = numerics.rng(seed)
    d_v, d_h, d_e, d_c, H = dims.d_v, dims.d_h, dims.d_e, dims.d_c, dims.n_heads
    b: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "h"):
        b[f"gru.W_{gate}"] = _glorot(gen, (d_h, d_v), d_v, d_h)
        b[f"gru.U_{gate}"] = _glorot(gen, (d_h, d_h), d_h, d_h)
        b[f"gru.b_{gate}"] = np.zeros(d_h)
    b["att.W_ph"] = _glorot(gen, (H, d_c, d_h), d_h, d_c)
    b["att.W_pe"] = _glorot(gen, (H, d_c, d_e), d_e, d_c)
    b["att.b_p"] = np.zeros((H, d_c))
    b["att.W_gh"] = _glorot(gen, (H, d_c, d_h), d_h, d_c)
    b["att.W_ge"] = _glorot(gen, (H, d_c, d_e), d_e, d_c)
    b["att.b_g"] = np.zeros((H, d_c))
    b["att.w_ah"] = _glorot(gen, (H, d_h), d_h, 1)
    b["att.w_ae"] = _glorot(gen, (H, d_e), d_e, 1)
    b["att.w_ac"] = _glorot(gen, (H, d_c), d_c, 1)
    b["att.b_a"] = np.zeros(H)
    b["dec.W_qh"] = _glorot(gen, (d_v, d_h), d_h, d_v)
    b["dec.W_qn"] = _glorot(gen, (d_v, H * d_c), H * d_c, d_v)
    b["dec.b_q"] = np.zeros(d_v)
    return ModelParams(dims, seed, b)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# GRU encoder
# ---------------------------------------------------------------------------

def gru_forward_batch(X: np.ndarray, lengths: np.ndarray, params: ModelParams):
    """Encode S padded sequences at once.

    X: (S, L, d_v) left-aligned inputs (already dropout-masked if training),
    lengths: (S,) valid step counts.  Returns final hidden states (S, d_h)
    and the cache needed by the backward pass.
    """
    p = params.blocks
    S, L, _ = X.shape
    d_h = params.dims.d_h
    h = np.zeros((S, d_h))
    steps = []
    for t in range(L):
        m = (lengths > t).astype(np.float64)[:, None]
        x = X[:, t, :]
        z = _sigmoid(x @ p["gru.W_z"].T + h @ p["gru.U_z"].T + p["gru.b_z"])
        r = _sigmoid(x @ p["gru.W_r"].T + h @ p["gru.U_r"].T + p["gru.b_r"])
        rh = r * h
        hc = np.tanh(x @ p["gru.W_h"].T + rh @ p["gru.U_h"].T + p["gru.b_h"])
        h_new = (1.0 - z) * h + z * hc
        steps.append((x, h, z, r, hc, m))
        h = m * h_new + (1.0 - m) * h
    return h, steps


def gru_backward_batch(dh: np.ndarray, steps, params: ModelParams, grads: dict) -> None:
    """Accumulate GRU parameter gradients for dL/dh_final (inputs are fixed)."""
    p = params.blocks
    dh = dh.copy()
    for x, h_prev, z, r, hc, m in reversed(steps):
        d_new = dh * m
        dh_carry = dh * (1.0 - m)
        dz = d_new * (hc - h_prev)
        dhc = d_new * z
        dh_prev = d_new * (1.0 - z)
        dpre_hc = dhc * (1.0 - hc * hc)
        grads["gru.W_h"] += dpre_hc.T @ x
        grads["gru.U_h"] += dpre_hc.T @ (r * h_prev)
        grads["gru.b_h"] += dpre_hc.sum(axis=0)
        drh = dpre_hc @ p["gru.U_h"]
        dr = drh * h_prev
        dh_prev += drh * r
        dpre_z = dz * z * (1.0 - z)
        grads["gru.W_z"] += dpre_z.T @ x
        grads["gru.U_z"] += dpre_z.T @ h_prev
        grads["gru.b_z"] += dpre_z.sum(axis=0)
        dh_prev += dpre_z @ p["gru.U_z"]
        dpre_r = dr * r * (1.0 - r)
        grads["gru.W_r"] += dpre_r.T @ x
        grads["gru.U_r"] += dpre_r.T @ h_prev
        grads["gru.b_r"] += dpre_r.sum(axis=0)
        dh_prev += dpre_r @ p["gru.U_r"]
        dh = dh_prev + dh_carry


def gru_encode(inputs: np.ndarray, params: ModelParams,
               dropout_mask: np.ndarray | None = None) -> np.ndarray:
    """Final hidden state of one input sequence; zero state when empty."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 and inputs.size:
        raise ValueError("inputs must be (steps, d_v)")
    if inputs.size == 0:
        return np.zeros(params.dims.d_h)
    if inputs.shape[1] != params.dims.d_v:
        raise ValueError(f"input dim {inputs.shape[1]} != d_v {params.dims.d_v}")
    if inputs.shape[0] > params.dims.seq_len:
        raise ValueError(f"sequence longer than L={params.dims.seq_len}")
    if dropout_mask is not None:
        inputs = inputs * dropout_mask
    h, _ = gru_forward_batch(inputs[None], np.array([inputs.shape[0]]), params)
    return h[0]


# ---------------------------------------------------------------------------
# Attention over neighbors
# ---------------------------------------------------------------------------

def attend_batch(h_i: np.ndarray, Hk: np.ndarray, E: np.ndarray, params: ModelParams):
    """Gated multi-head attention over neighbors.

    h_i: (B, d_h), Hk: (B, N, d_h), E: (B, N, d_e).
    Returns (n, cache) with n: (B, n_heads * d_c).
    """
    p = params.blocks
    B, N, _ = Hk.shape
    pre_p = (np.einsum("bnd,hcd->bnhc", Hk, p["att.W_ph"])
             + np.einsum("bne,hce->bnhc", E, p["att.W_pe"])
             + p["att.b_p"][None, None])
    P = np.tanh(pre_p)
    pre_g = (np.einsum("bd,hcd->bhc", h_i, p["att.W_gh"])[:, None]
             + np.einsum("bne,hce->bnhc", E, p["att.W_ge"])
             + p["att.b_g"][None, None])
    G = _sigmoid(pre_g)
    C = G * P
    alpha = (np.einsum("bd,hd->bh", h_i, p["att.w_ah"])[:, None]
             + np.einsum("bne,he->bnh", E, p["att.w_ae"])
             + np.einsum("bnhc,hc->bnh", C, p["att.w_ac"])
             + p["att.b_a"][None, None])
    act = np.where(alpha > 0, alpha, LEAKY_SLOPE * alpha)
    act_shift = act - act.max(axis=1, keepdims=True)
    ew = np.exp(act_shift)
    w = ew / ew.sum(axis=1, keepdims=True)          # (B, N, H)
    head_out = np.einsum("bnh,bnhc->bhc", w, C)
    n = head_out.reshape(B, -1)
    cache = (h_i, Hk, E, P, G, C, alpha, w)
    return n, cache


def attend_backward_batch(dn: np.ndarray, cache, params: ModelParams, grads: dict):
    """Backward through the attention block; edge features are fixed inputs."""
    p = params.blocks
    h_i, Hk, E, P, G, C, alpha, w = cache
    B, N, H, d_c = C.shape
    dhead = dn.reshape(B, H, d_c)
    dw = np.einsum("bhc,bnhc->bnh", dhead, C)
    dC = w[..., None] * dhead[:, None]
    # softmax backward over the neighbor axis
    dact = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    dalpha = dact * np.where(alpha > 0, 1.0, LEAKY_SLOPE)
    grads["att.w_ah"] += np.einsum("bnh,bd->hd", dalpha, h_i)
    grads["att.w_ae"] += np.einsum("bnh,bne->he", dalpha, E)
    grads["att.w_ac"] += np.einsum("bnh,bnhc->hc", dalpha, C)
    grads["att.b_a"] += dalpha.sum(axis=(0, 1))
    dh_i = np.einsum("bnh,hd->bd", dalpha, p["att.w_ah"])
    dC += dalpha[..., None] * p["att.w_ac"][None, None]
    dG = dC * P
    dP = dC * G
    dpre_p = dP * (1.0 - P * P)
    grads["att.W_ph"] += np.einsum("bnhc,bnd->hcd", dpre_p, Hk)
    grads["att.W_pe"] += np.einsum("bnhc,bne->hce", dpre_p, E)
    grads["att.b_p"] += dpre_p.sum(axis=(0, 1))
    dHk = np.einsum("bnhc,hcd->bnd", dpre_p, p["att.W_ph"])
    dpre_g = dG * G * (1.0 - G)
    grads["att.W_gh"] += np.einsum("bnhc,bd->hcd", dpre_g, h_i)
    grads["att.W_ge"] += np.einsum("bnhc,bne->hce", dpre_g, E)
    grads["att.b_g"] += dpre_g.sum(axis=(0, 1))
    dh_i += np.einsum("bnhc,hcd->bd", dpre_g, p["att.W_gh"])
    return dh_i, dHk


def attend(h_i: np.ndarray, ctx: NeighborContext, params: ModelParams) -> np.ndarray:
    """Neighbor summary for one target user."""
    if len(ctx.neighbor_ids) == 0:
        raise ValueError("attend requires at least one neighbor")
    if ctx.hidden.shape[1] != params.dims.d_h or ctx.edges.shape[1] != params.dims.d_e:
        raise ValueError("neighbor context dimensions inconsistent with params")
    n, _ = attend_batch(h_i[None], ctx.hidden[None], ctx.edges[None], params)
    return n[0]


# ---------------------------------------------------------------------------
# Decoder and scoring
# ---------------------------------------------------------------------------

def decode_batch(h_i: np.ndarray, n_i: np.ndarray, params: ModelParams):
    p = params.blocks
    pre = h_i @ p["dec.W_qh"].T + n_i @ p["dec.W_qn"].T + p["dec.b_q"]
    q = np.tanh(pre)
    return q, (h_i, n_i, q)


def decode_backward_batch(dq: np.ndarray, cache, params: ModelParams, grads: dict):
    p = params.blocks
    h_i, n_i, q = cache
    dpre = dq * (1.0 - q * q)
    grads["dec.W_qh"] += dpre.T @ h_i
    grads["dec.W_qn"] += dpre.T @ n_i
    grads["dec.b_q"] += dpre.sum(axis=0)
    return dpre @ p["dec.W_qh"], dpre @ p["dec.W_qn"]


def decode(h_i: np.ndarray, n_i: np.ndarray, params: ModelParams,
           dropout_mask=None) -> np.ndarray:
    """q_i = tanh(W_qh h_i + W_qn n_i + b_q); mask applies to the inputs."""
    if h_i.shape != (params.dims.d_h,) or n_i.shape != (params.dims.d_n,):
        raise ValueError("decode input dimensions inconsistent with params")
    if dropout_mask is not None:
        mh, mn = dropout_mask
        h_i, n_i = h_i * mh, n_i * mn
    q, _ = decode_batch(h_i[None], n_i[None], params)
    return q[0]


def score(q_i: np.ndarray, v_j: np.ndarray) -> float:
    if q_i.shape != v_j.shape:
        raise ValueError("score inputs must have equal dimension")
    return float(np.dot(q_i, v_j))


def forward(history_embeddings: np.ndarray, ctx: NeighborContext | None,
            candidates: np.ndarray, params: ModelParams,
            input_dropout_mask=None, decode_dropout_mask=None,
            neighbor_off: bool = False) -> np.ndarray:
    """Full scoring pass for one user: encode, attend, decode, inner product.

    With neighbor_off the summary is forced to zero, which is the
    sequence-only ablation baseline.
    """
    h = gru_encode(history_embeddings, params, input_dropout_mask)
    if neighbor_off:
        n = np.zeros(params.dims.d_n)
    else:
        if ctx is None:
            raise ValueError("neighbor context required unless neighbor_off")
        n = attend(h, ctx, params)
    q = decode(h, n, params, decode_dropout_mask)
    return candidates @ q


# ---------------------------------------------------------------------------
# Checkpoint serialization (bit-exact round trip)
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path, extra: dict | None = None,
                    config_hash: int = 0) -> None:
    """Write named parameter blocks; `extra` holds e.g. optimizer state."""
    blocks = dict(params.blocks)
    if extra:
        blocks.update(extra)
    d = params.dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQQQQQQqQ", FORMAT_VERSION, d.d_v, d.d_h, d.d_e,
                            d.d_c, d.n_heads, d.seq_len, params.seed, config_hash))
        f.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            a = np.asarray(blocks[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            for s in a.shape:
                f.write(struct.pack("<Q", s))
            f.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelParams, extra blocks dict)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, d_v, d_h, d_e, d_c, H, L, seed, _ = struct.unpack("<IQQQQQQqQ", f.read(68))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            n_el = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(n_el * 8), dtype="<f8").reshape(shape).copy()
            blocks[name] = data
    dims = ModelDims(d_v=int(d_v), d_h=int(d_h), d_e=int(d_e), d_c=int(d_c),
                     n_heads=int(H), seq_len=int(L))
    params = ModelParams(dims, int(seed), {k: v for k, v in blocks.items()
                                           if not k.startswith("opt.")})
    extra = {k: v for k, v in blocks.items() if k.startswith("opt.")}
    return params, extra
