import math
from dataclasses import replace

import numpy as np
import pytest

from avvp import tensor as tn
from avvp.errors import ConfigError, DimensionError
from avvp.model import (
    MMT,
    VARIANTS,
    ModelConfig,
    classify,
    compute_messengers,
    decoder_layer,
    encoder_layer,
    init_params,
    pool_video_level,
    sinusoidal_pe,
    tokenize,
)

TINY = ModelConfig(T=4, C=3, d=8, d_a=5, d_v=5)


def _layer_params(prefix, d, rng, kinds, ffn_mult=2):
    p = {}
    for k in kinds:
        if k in ("self", "cross"):
            for w in "qkvo":
                p[f"{prefix}.{k}.w{w}"] = rng.normal(size=(d, d)) / math.sqrt(d)
                p[f"{prefix}.{k}.b{w}"] = rng.normal(size=d) * 0.1
        elif k.startswith("ln"):
            p[f"{prefix}.{k}.g"] = 1 + 0.1 * rng.normal(size=d)
            p[f"{prefix}.{k}.b"] = 0.1 * rng.normal(size=d)
        elif k == "ffn":
            p[f"{prefix}.ffn.w1"] = rng.normal(size=(d, ffn_mult * d)) / math.sqrt(d)
            p[f"{prefix}.ffn.b1"] = 0.1 * rng.normal(size=ffn_mult * d)
            p[f"{prefix}.ffn.w2"] = rng.normal(size=(ffn_mult * d, d)) / math.sqrt(ffn_mult * d)
            p[f"{prefix}.ffn.b2"] = 0.1 * rng.normal(size=d)
    return p


# straight-line numpy oracle, no tape involved


def _np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_attn(q_in, kv_in, p, pre):
    q = q_in @ p[f"{pre}.wq"] + p[f"{pre}.bq"]
    k = kv_in @ p[f"{pre}.wk"] + p[f"{pre}.bk"]
    v = kv_in @ p[f"{pre}.wv"] + p[f"{pre}.bv"]
    s = q @ k.T / math.sqrt(q.shape[-1])
    s = np.exp(s - s.max(-1, keepdims=True))
    w = s / s.sum(-1, keepdims=True)
    return (w @ v) @ p[f"{pre}.wo"] + p[f"{pre}.bo"]


def _np_ffn(x, p, pre):
    h = np.maximum(x @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"], 0)
    return h @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]


def _np_encoder(S, p, pre):
    St = _np_ln(_np_attn(S, S, p, f"{pre}.self") + S, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    return _np_ln(_np_ffn(St, p, pre) + St, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])


def _np_decoder(R, ctx, p, pre):
    Rt = _np_ln(_np_attn(R, R, p, f"{pre}.self") + R, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    Rh = _np_ln(_np_attn(Rt, ctx, p, f"{pre}.cross") + Rt, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    return _np_ln(_np_ffn(Rh, p, pre) + Rh, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])


# -- tokenize -----------------------------------------------------------------------


def test_tokenize_zero_features_gives_pe():
    pe = sinusoidal_pe(4, 3)
    out = tokenize(np.zeros((4, 2)), np.ones((2, 3)), pe)
    assert np.array_equal(out.data, pe)


def test_tokenize_identity():
    f = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(tokenize(f, np.eye(3), np.zeros((4, 3))).data, f)


def test_tokenize_hand_case():
    f = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    W = np.array([[2.0, 0.0], [1.0, -1.0]])
    PE = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    # row0: [2+2, -2] ; row1: [-1, 1] ; row2: [6+0.5, -0.5]
    expected = np.array([[4.1, -1.8], [-0.7, 1.4], [7.0, 0.1]])
    assert np.allclose(tokenize(f, W, PE).data, expected)


def test_tokenize_length_mismatch():
    with pytest.raises(DimensionError):
        tokenize(np.zeros((3, 2)), np.ones((2, 2)), np.zeros((4, 2)))


# -- encoder ----------------------------------------------------------------------------


def test_encoder_single_token_attends_to_itself():
    rng = np.random.default_rng(1)
    p = _layer_params("e", 4, rng, ["self", "ln1", "ffn", "ln2"])
    S = rng.normal(size=(1, 4))
    rec = {}
    encoder_layer(S, p, "e", record=rec)
    assert rec["e.self"].tolist() == [[1.0]]
    from avvp.model import attention

    out, _ = attention(S, S, p, "e.self")
    v_only = (S @ p["e.self.wv"] + p["e.self.bv"]) @ p["e.self.wo"] + p["e.self.bo"]
    assert np.allclose(out.data, v_only)


def test_encoder_identical_rows_uniform_attention():
    rng = np.random.default_rng(2)
    p = _layer_params("e", 4, rng, ["self", "ln1", "ffn", "ln2"])
    S = np.tile(rng.normal(size=(1, 4)), (5, 1))
    rec = {}
    encoder_layer(S, p, "e", record=rec)
    assert np.allclose(rec["e.self"], 0.2)


def test_encoder_matches_oracle():
    rng = np.random.default_rng(3)
    p = _layer_params("e", 6, rng, ["self", "ln1", "ffn", "ln2"])
    S = rng.normal(size=(5, 6))
    assert np.allclose(encoder_layer(S, p, "e").data, _np_encoder(S, p, "e"), atol=1e-12)


# -- messengers -------------------------------------------------------------------------


def test_messengers_constant_sequence():
    rng = np.random.default_rng(4)
    v = rng.normal(size=3)
    W = rng.normal(size=(3, 3))
    M = compute_messengers(np.tile(v, (6, 1)), W, 3).data
    assert np.allclose(M, np.tanh(v @ W))


def test_messengers_zero_input():
    assert np.array_equal(compute_messengers(np.zeros((4, 3)), np.ones((3, 3)), 2).data, np.zeros((2, 3)))


def test_messengers_hand_case():
    S = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [0.0, -2.0]])
    W = np.array([[0.5, 0.0], [0.0, 0.25]])
    # S W rows: [.5,0],[0,.25],[1,.5],[0,-.5]; chunk means: [.25,.125], [.5,0]
    expected = np.tanh(np.array([[0.25, 0.125], [0.5, 0.0]]))
    assert np.allclose(compute_messengers(S, W, 2).data, expected)


def test_messengers_range_error():
    with pytest.raises(ValueError):
        compute_messengers(np.zeros((4, 3)), np.ones((3, 3)), 5)


# -- decoder ----------------------------------------------------------------------------


def test_decoder_single_messenger():
    rng = np.random.default_rng(5)
    p = _layer_params("x", 4, rng, ["self", "ln1", "cross", "ln2", "ffn", "ln3"])
    R = rng.normal(size=(6, 4))
    M = np.tanh(rng.normal(size=(1, 4)))
    rec = {}
    decoder_layer(R, M, p, "x", record=rec)
    assert np.array_equal(rec["x.cross"], np.ones((6, 1)))
    from avvp.model import attention

    out, _ = attention(rng.normal(size=(6, 4)), M, p, "x.cross")
    assert np.allclose(out.data, out.data[0])


def test_decoder_identical_context_rows():
    rng = np.random.default_rng(6)
    p = _layer_params("x", 4, rng, ["self", "ln1", "cross", "ln2", "ffn", "ln3"])
    R = rng.normal(size=(3, 4))
    row = rng.normal(size=(1, 4))
    many = decoder_layer(R, np.tile(row, (5, 1)), p, "x").data
    one = decoder_layer(R, row, p, "x").data
    assert np.allclose(many, one, atol=1e-12)


def test_decoder_matches_oracle():
    rng = np.random.default_rng(7)
    p = _layer_params("x", 6, rng, ["self", "ln1", "cross", "ln2", "ffn", "ln3"])
    R = rng.normal(size=(5, 6))
    ctx = rng.normal(size=(2, 6))
    assert np.allclose(decoder_layer(R, ctx, p, "x").data, _np_decoder(R, ctx, p, "x"), atol=1e-12)


# -- classifier and pooling --------------------------------------------------------------


def test_classify_zero_weights():
    out = classify(np.random.default_rng(8).normal(size=(4, 3)), np.zeros((3, 2))).data
    assert np.array_equal(out, np.full((4, 2), 0.5))


def test_classify_saturation_monotone():
    R = np.array([[1.0]])
    vals = [classify(R, np.array([[s, -s]])).data[0] for s in (1, 5, 20, 40)]
    pos = [v[0] for v in vals]
    neg = [v[1] for v in vals]
    assert pos == sorted(pos) and neg == sorted(neg, reverse=True)
    assert pos[-1] > 1 - 1e-12 and neg[-1] < 1e-12


def test_classify_hand_case():
    R = np.array([[1.0, -1.0]])
    W = np.array([[2.0, 0.0], [1.0, 3.0]])
    # logits [1, -3]
    expected = 1 / (1 + np.exp(-np.array([[1.0, -3.0]])))
    assert np.allclose(classify(R, W).data, expected)


def _pool_params(d, C, rng, zero=False):
    mk = (lambda: np.zeros((d, C))) if zero else (lambda: rng.normal(size=(d, C)))
    return {"a.tpool": mk(), "v.tpool": mk(), "mpool": mk()}


def test_pool_constant_over_time():
    rng = np.random.default_rng(9)
    Pa = np.tile(rng.uniform(0.05, 0.95, size=(1, 3)), (5, 1))
    Pv = np.tile(rng.uniform(0.05, 0.95, size=(1, 3)), (5, 1))
    a, v, _ = pool_video_level(Pa, Pv, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), _pool_params(4, 3, rng))
    assert np.allclose(a.data, Pa[0]) and np.allclose(v.data, Pv[0])


def test_pool_zero_params_is_temporal_mean():
    rng = np.random.default_rng(10)
    Pa, Pv = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 3))
    a, v, vid = pool_video_level(Pa, Pv, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), _pool_params(4, 3, rng, zero=True))
    assert np.allclose(a.data, Pa.mean(0))
    assert np.allclose(v.data, Pv.mean(0))
    assert np.allclose(vid.data, (Pa.mean(0) + Pv.mean(0)) / 2)


def test_pool_convex_bounds_random():
    rng = np.random.default_rng(11)
    for _ in range(200):
        Pa, Pv = rng.uniform(size=(6, 3)), rng.uniform(size=(6, 3))
        a, v, vid = pool_video_level(Pa, Pv, rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), _pool_params(4, 3, rng))
        for pool, P in ((a, Pa), (v, Pv)):
            assert (pool.data >= P.min(0) - 1e-12).all() and (pool.data <= P.max(0) + 1e-12).all()
        both = np.concatenate([Pa, Pv])
        assert (vid.data >= both.min(0) - 1e-12).all() and (vid.data <= both.max(0) + 1e-12).all()


# -- full forward -----------------------------------------------------------------------


def test_forward_default_shapes():
    cfg = ModelConfig(T=10, C=25, d=16, d_a=128, d_v=64)
    rng = np.random.default_rng(12)
    out = MMT(cfg, seed=0).forward(rng.normal(size=(10, 128)), rng.normal(size=(10, 64)))
    assert out.P_a.shape == (10, 25) and out.P_v.shape == (10, 25)
    assert out.Ptilde_a.shape == out.Ptilde_v.shape == out.Ptilde_video.shape == (25,)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_classifier_gives_half(variant):
    cfg = replace(TINY, variant=variant)
    m = MMT(cfg, seed=1)
    m.params["a.cls"].data[:] = 0
    m.params["v.cls"].data[:] = 0
    rng = np.random.default_rng(13)
    out = m.forward(rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4, 5)))
    for arr in out.numpy().values():
        assert np.allclose(arr, 0.5, rtol=0, atol=1e-14)


def test_full_equals_no_msg_on_constructed_case():
    cfg = ModelConfig(T=1, C=3, d=4, d_a=3, d_v=3, n_a=1, n_v=1)
    m = MMT(cfg, seed=2)
    for mod in "av":
        m.params[f"{mod}.enc0.ln2.g"].data[:] = 0.1  # keep tokens inside (-1, 1)
    rng = np.random.default_rng(14)
    audio, visual = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    # encoder outputs, then W_msg = diag(atanh(s) / s) so tanh(s W_msg) == s
    for mod, feats in (("a", audio), ("v", visual)):
        S = tokenize(feats, m.params[f"{mod}.enc_proj"], m.pe)
        s = encoder_layer(S, m.params, f"{mod}.enc0").data[0]
        assert np.abs(s).max() < 1
        m.params[f"{mod}.msg"].data[:] = np.diag(np.arctanh(s) / s)
    no_msg = MMT(replace(cfg, variant="no_msg"), m.params)
    full_out = m.forward(audio, visual).numpy()
    nomsg_out = no_msg.forward(audio, visual).numpy()
    for k in full_out:
        assert np.allclose(full_out[k], nomsg_out[k], atol=1e-12)


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(variant="mbt")
    with pytest.raises(ValueError):
        ModelConfig(variant="nope")


def test_feature_dim_mismatch():
    with pytest.raises(DimensionError):
        MMT(TINY).forward(np.zeros((4, 6)), np.zeros((4, 5)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_attention_rows_and_messenger_range(variant):
    cfg = replace(TINY, variant=variant, heads=2)
    m = MMT(cfg, seed=3)
    rng = np.random.default_rng(15)
    out = m.forward(rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5)), record=True)
    assert out.attention
    for w in out.attention.values():
        assert np.allclose(w.sum(-1), 1.0, atol=1e-6)
        assert (w >= 0).all()
    if variant in ("full", "no_fa"):
        S = tokenize(rng.normal(size=(4, 5)), m.params["v.enc_proj"], m.pe)
        M = compute_messengers(encoder_layer(S, m.params, "v.enc0"), m.params["v.msg"], 1).data
        assert (np.abs(M) < 1).all()


def test_forward_deterministic_and_batched_consistent():
    m = MMT(TINY, seed=4)
    rng = np.random.default_rng(16)
    a, v = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    o1, o2 = m.predict(a, v), m.predict(a, v)
    for k in o1:
        assert np.array_equal(o1[k], o2[k])
    single = m.predict(a[1], v[1])
    for k in o1:
        assert np.allclose(single[k], o1[k][1], atol=1e-13)


def test_class_permutation_equivariance():
    m = MMT(TINY, seed=5)
    rng = np.random.default_rng(17)
    a, v = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    base = m.predict(a, v)
    perm = np.array([2, 0, 1])
    for mod in "av":
        m.params[f"{mod}.cls"].data[:] = m.params[f"{mod}.cls"].data[:, perm]
    out = m.predict(a, v)
    assert np.allclose(out["P_a"], base["P_a"][:, perm], atol=1e-14)
    assert np.allclose(out["P_v"], base["P_v"][:, perm], atol=1e-14)


def test_prediction_convexity_random_params():
    rng = np.random.default_rng(18)
    a, v = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    for i in range(1000):
        out = MMT(replace(TINY, variant=VARIANTS[i % len(VARIANTS)]), seed=i).predict(a, v)
        for mod in "av":
            P, pool = out[f"P_{mod}"], out[f"Ptilde_{mod}"]
            assert (P > 0).all() and (P < 1).all()
            assert (pool >= P.min(0) - 1e-12).all() and (pool <= P.max(0) + 1e-12).all()


def test_init_is_seeded_and_layer_norm_identity():
    p1, p2 = init_params(TINY, 7), init_params(TINY, 7)
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    assert np.array_equal(p1["a.enc0.ln1.g"].data, np.ones(8))
    bound = 1 / math.sqrt(5)
    assert np.abs(p1["a.enc_proj"].data).max() <= bound


def test_variant_parameter_sets():
    names = lambda v: set(init_params(replace(TINY, variant=v)))
    assert "a.msg" in names("full") and "v.msg" in names("full")
    assert not any(".msg" in n for n in names("no_msg"))
    assert "v.msg" in names("no_fa") and "a.msg" not in names("no_fa")
    assert any(".han0." in n for n in names("han")) and not any(".dec" in n for n in names("han_ca"))
