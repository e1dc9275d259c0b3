import numpy as np
import pytest

from csrn import model, numerics

from oracles import attend_scalar, decode_scalar, gru_scalar

DIMS = model.ModelDims(d_v=5, d_h=6, d_e=4, d_c=3, n_heads=2, seq_len=8)


def small_params(seed=0, scale=0.4):
    """Random small parameters including nonzero biases."""
    gen = numerics.rng(seed)
    p = model.init_params(DIMS, seed)
    for k in p.blocks:
        p.blocks[k] = gen.standard_normal(p.blocks[k].shape) * scale
    return p


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def test_init_params_shapes_and_zero_biases():
    p = model.init_params(DIMS, 3)
    assert p.blocks["gru.W_z"].shape == (6, 5)
    assert p.blocks["att.W_ph"].shape == (2, 3, 6)
    assert p.blocks["att.w_ae"].shape == (2, 4)
    assert p.blocks["dec.W_qn"].shape == (5, 6)
    for name, block in p.blocks.items():
        if ".b_" in name:
            assert np.all(block == 0.0)
        else:
            assert np.any(block != 0.0)


def test_init_params_deterministic():
    a, b = model.init_params(DIMS, 11), model.init_params(DIMS, 11)
    for k in a.blocks:
        assert np.array_equal(a.blocks[k], b.blocks[k])


# ---------------------------------------------------------------------------
# GRU encoder
# ---------------------------------------------------------------------------

def test_gru_empty_sequence_gives_zero_state():
    p = small_params()
    assert np.array_equal(model.gru_encode(np.zeros((0, 5)), p), np.zeros(6))


def test_gru_matches_scalar_oracle():
    gen = numerics.rng(4)
    p = small_params(seed=2)
    for _ in range(10):
        steps = int(gen.integers(1, 6))
        seq = gen.standard_normal((steps, 5))
        got = model.gru_encode(seq, p)
        want = gru_scalar(seq.tolist(), p.blocks)
        assert np.max(np.abs(got - want)) < 1e-12


def test_gru_batch_matches_individual_encoding():
    gen = numerics.rng(7)
    p = small_params(seed=3)
    lengths = np.array([3, 1, 5, 0])
    X = np.zeros((4, 8, 5))
    for s, ln in enumerate(lengths):
        X[s, :ln] = gen.standard_normal((ln, 5))
    h, _ = model.gru_forward_batch(X, lengths, p)
    for s, ln in enumerate(lengths):
        assert np.allclose(h[s], model.gru_encode(X[s, :ln], p), atol=1e-14)


def test_gru_hidden_state_bounded():
    gen = numerics.rng(9)
    p = small_params(seed=5, scale=2.0)
    for _ in range(20):
        seq = gen.standard_normal((6, 5)) * 3.0
        h = model.gru_encode(seq, p)
        assert np.all(np.abs(h) < 1.0 + 1e-12)


def test_gru_encode_validates_inputs():
    p = small_params()
    with pytest.raises(ValueError):
        model.gru_encode(np.zeros((2, 4)), p)      # wrong d_v
    with pytest.raises(ValueError):
        model.gru_encode(np.zeros((9, 5)), p)      # longer than seq_len


def test_gru_dropout_mask_applied():
    p = small_params(seed=6)
    seq = numerics.rng(0).standard_normal((3, 5))
    mask = np.zeros_like(seq)
    assert np.array_equal(model.gru_encode(seq, p, dropout_mask=mask),
                          model.gru_encode(np.zeros_like(seq), p))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def rand_ctx(gen, N=3):
    return (gen.standard_normal(DIMS.d_h),
            gen.standard_normal((N, DIMS.d_h)),
            gen.standard_normal((N, DIMS.d_e)))


def test_attend_matches_scalar_oracle_and_permutation_invariant():
    gen = numerics.rng(12)
    p = small_params(seed=8)
    for _ in range(10):
        h_i, Hk, E = rand_ctx(gen)
        n, _ = model.attend_batch(h_i[None], Hk[None], E[None], p)
        want = attend_scalar(h_i, Hk, E, p.blocks)
        assert np.max(np.abs(n[0] - want)) < 1e-12
        perm = gen.permutation(3)
        n2, _ = model.attend_batch(h_i[None], Hk[perm][None], E[perm][None], p)
        assert np.max(np.abs(n[0] - n2[0])) < 1e-12


def test_attend_single_neighbor_weight_is_one():
    gen = numerics.rng(13)
    p = small_params(seed=9)
    h_i, Hk, E = rand_ctx(gen, N=1)
    n, cache = model.attend_batch(h_i[None], Hk[None], E[None], p)
    w = cache[-1]
    assert np.allclose(w, 1.0)
    # n must be the (gated) per-head channels of that single neighbor
    C = cache[5]
    assert np.allclose(n[0], C[0, 0].reshape(-1))


def test_attend_identical_neighbors_uniform_weights():
    gen = numerics.rng(14)
    p = small_params(seed=10)
    h_i = gen.standard_normal(DIMS.d_h)
    hk = gen.standard_normal(DIMS.d_h)
    e = gen.standard_normal(DIMS.d_e)
    Hk = np.tile(hk, (4, 1))
    E = np.tile(e, (4, 1))
    _, cache = model.attend_batch(h_i[None], Hk[None], E[None], p)
    w = cache[-1]
    assert np.allclose(w, 0.25, atol=1e-15)


def test_attend_weights_sum_to_one_and_gate_ranges():
    gen = numerics.rng(15)
    p = small_params(seed=11, scale=0.5)
    for _ in range(50):
        h_i, Hk, E = rand_ctx(gen, N=5)
        _, cache = model.attend_batch(h_i[None], Hk[None], E[None], p)
        P, G, w = cache[3], cache[4], cache[-1]
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-12
        assert np.all((w >= 0) & (w <= 1))
        assert np.all((G > 0) & (G < 1))
        assert np.all((P > -1) & (P < 1))


def test_attend_zero_information_reduction():
    p = small_params(seed=16)
    p.blocks["att.b_p"][:] = 0.0
    h_i = numerics.rng(1).standard_normal(DIMS.d_h)
    Hk = np.zeros((3, DIMS.d_h))
    E = np.zeros((3, DIMS.d_e))
    n, _ = model.attend_batch(h_i[None], Hk[None], E[None], p)
    assert np.array_equal(n[0], np.zeros(DIMS.d_n))


def test_attend_requires_neighbors():
    p = small_params()
    ctx = model.NeighborContext(np.array([], dtype=np.int64),
                                np.zeros((0, DIMS.d_h)), np.zeros((0, DIMS.d_e)))
    with pytest.raises(ValueError):
        model.attend(np.zeros(DIMS.d_h), ctx, p)


def test_attend_dimension_validation():
    p = small_params()
    ctx = model.NeighborContext(np.array([0]), np.zeros((1, DIMS.d_h + 1)),
                                np.zeros((1, DIMS.d_e)))
    with pytest.raises(ValueError):
        model.attend(np.zeros(DIMS.d_h), ctx, p)


# ---------------------------------------------------------------------------
# Decoder and scoring
# ---------------------------------------------------------------------------

def test_decode_matches_scalar_oracle():
    gen = numerics.rng(20)
    p = small_params(seed=17)
    h = gen.standard_normal(DIMS.d_h)
    n = gen.standard_normal(DIMS.d_n)
    got = model.decode(h, n, p)
    assert np.max(np.abs(got - decode_scalar(h, n, p.blocks))) < 1e-13


def test_decode_zero_inputs_zero_bias_gives_zero():
    p = small_params(seed=18)
    p.blocks["dec.b_q"][:] = 0.0
    q = model.decode(np.zeros(DIMS.d_h), np.zeros(DIMS.d_n), p)
    assert np.array_equal(q, np.zeros(DIMS.d_v))


def test_decode_validates_shapes():
    p = small_params()
    with pytest.raises(ValueError):
        model.decode(np.zeros(DIMS.d_h + 1), np.zeros(DIMS.d_n), p)


def test_score_is_inner_product():
    q = np.array([1.0, 2.0, -1.0])
    v = np.array([0.5, 0.5, 2.0])
    assert model.score(q, v) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        model.score(q, np.zeros(4))


# ---------------------------------------------------------------------------
# Full forward
# ---------------------------------------------------------------------------

def test_forward_matches_composed_oracle():
    gen = numerics.rng(30)
    p = small_params(seed=19)
    seq = gen.standard_normal((4, DIMS.d_v))
    Hk_src = [gen.standard_normal((2, DIMS.d_v)) for _ in range(3)]
    ctx_hidden = np.stack([gru_scalar(s.tolist(), p.blocks) for s in Hk_src])
    E = gen.standard_normal((3, DIMS.d_e))
    ctx = model.NeighborContext(np.arange(3), ctx_hidden, E)
    cands = gen.standard_normal((7, DIMS.d_v))
    got = model.forward(seq, ctx, cands, p)
    h = gru_scalar(seq.tolist(), p.blocks)
    n = attend_scalar(h, ctx_hidden, E, p.blocks)
    q = decode_scalar(h, n, p.blocks)
    assert np.max(np.abs(got - cands @ q)) < 1e-10


def test_forward_neighbor_off_equals_zero_summary():
    gen = numerics.rng(31)
    p = small_params(seed=21)
    seq = gen.standard_normal((3, DIMS.d_v))
    cands = gen.standard_normal((4, DIMS.d_v))
    got = model.forward(seq, None, cands, p, neighbor_off=True)
    h = model.gru_encode(seq, p)
    q = model.decode(h, np.zeros(DIMS.d_n), p)
    assert np.allclose(got, cands @ q, atol=1e-14)


def test_forward_requires_context_unless_off():
    p = small_params()
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, DIMS.d_v)), None, np.zeros((1, DIMS.d_v)), p)


def test_forward_identity_dropout_masks_are_noop():
    gen = numerics.rng(32)
    p = small_params(seed=22)
    seq = gen.standard_normal((3, DIMS.d_v))
    ctx = model.NeighborContext(np.arange(2), gen.standard_normal((2, DIMS.d_h)),
                                gen.standard_normal((2, DIMS.d_e)))
    cands = gen.standard_normal((4, DIMS.d_v))
    plain = model.forward(seq, ctx, cands, p)
    masked = model.forward(seq, ctx, cands, p,
                           input_dropout_mask=np.ones_like(seq),
                           decode_dropout_mask=(np.ones(DIMS.d_h), np.ones(DIMS.d_n)))
    assert np.array_equal(plain, masked)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = small_params(seed=23)
    extra = {"opt.cache.gru.W_z": numerics.rng(0).standard_normal((6, 5)),
             "opt.step": np.array(42.0)}
    path = tmp_path / "ck.bin"
    model.save_checkpoint(p, path, extra=extra, config_hash=123)
    back, extra_back = model.load_checkpoint(path)
    assert back.dims == p.dims and back.seed == p.seed
    assert set(back.blocks) == set(p.blocks)
    for k in p.blocks:
        assert back.blocks[k].tobytes() == p.blocks[k].tobytes()
    assert extra_back["opt.cache.gru.W_z"].tobytes() == extra["opt.cache.gru.W_z"].tobytes()
    assert float(extra_back["opt.step"]) == 42.0


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    p = small_params(seed=24)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    model.save_checkpoint(p, a)
    model.save_checkpoint(p, b)
    assert a.read_bytes() == b.read_bytes()
