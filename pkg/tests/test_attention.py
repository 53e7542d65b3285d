import numpy as np
import pytest
from hypothesis import given, strategies as st

from prefixlab import tensor as T
from prefixlab.attention import (
    AttentionConfig,
    AttentionWeights,
    attend,
    attn_matrix_form,
    attn_token_form,
    init_attention_weights,
    multi_head_forward,
    project,
)
from prefixlab.tensor import ShapeError

from conftest import make_head


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(4, 2, 2, n_heads=4, n_kv_heads=3)
    with pytest.raises(ValueError):
        AttentionConfig(0, 2, 2)
    assert AttentionConfig(4, 2, 2, n_heads=4).n_kv_heads == 4


def test_contiguous_kv_grouping():
    cfg = AttentionConfig(4, 2, 2, n_heads=6, n_kv_heads=2)
    assert [cfg.kv_index(h) for h in range(6)] == [0, 0, 0, 1, 1, 1]


def test_single_token_returns_value():
    cfg, w, X, _ = make_head(0, n=1)
    _, _, v = project(X, w, cfg)
    np.testing.assert_array_equal(attn_matrix_form(X, w, cfg).data, v.data)
    np.testing.assert_allclose(attn_token_form(X, w, cfg).data, v.data, atol=1e-15)


def test_two_identical_tokens():
    cfg, w, X, _ = make_head(1, n=1)
    X2 = T.concat([X, X], axis=0)
    out = attn_matrix_form(X2, w, cfg).data
    v = (X @ w.W_V[0]).data[0]
    np.testing.assert_allclose(out[1], v, atol=1e-14)


def test_matrix_and_token_form_n4_d3():
    cfg, w, X, _ = make_head(2, n=4, d=3)
    np.testing.assert_allclose(attn_matrix_form(X, w, cfg).data, attn_token_form(X, w, cfg).data, atol=1e-12, rtol=0)


def test_uniform_similarity_gives_running_mean():
    cfg, w, X, _ = make_head(3, n=5, d=3)
    w.W_Q[0] = T.Tensor(np.zeros((3, 2)))  # q = 0 so every similarity is 1
    v = (X @ w.W_V[0]).data
    means = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(attn_token_form(X, w, cfg).data, means, atol=1e-14)
    np.testing.assert_allclose(attn_matrix_form(X, w, cfg).data, means, atol=1e-14)


def test_shape_mismatch():
    cfg, w, _, _ = make_head(4, d=3)
    with pytest.raises(ShapeError):
        attn_matrix_form(T.Tensor(np.ones((2, 5))), w, cfg)


@given(st.integers(0, 100_000), st.integers(1, 16), st.integers(1, 8), st.integers(1, 8))
def test_form_equivalence(seed, n, d, dk):
    cfg, w, X, _ = make_head(seed, n=n, d=d, dk=dk)
    dev = np.abs(attn_matrix_form(X, w, cfg).data - attn_token_form(X, w, cfg).data).max()
    assert dev <= 1e-10


def test_form_equivalence_large_logits():
    cfg, w, X, _ = make_head(5, n=6, d=4)
    X = T.Tensor(X.data * 40.0)
    a, b = attn_matrix_form(X, w, cfg).data, attn_token_form(X, w, cfg).data
    assert np.all(np.isfinite(b))
    assert np.abs(a - b).max() <= 1e-8 * max(1.0, np.abs(a).max())


@given(st.integers(0, 100_000), st.integers(2, 10))
def test_causality(seed, n):
    cfg, w, X, rng = make_head(seed, n=n, d=3)
    j = int(rng.integers(n))
    Xp = X.data.copy()
    Xp[j] += rng.normal(size=3)
    a = attn_matrix_form(X, w, cfg).data
    b = attn_matrix_form(T.Tensor(Xp), w, cfg).data
    np.testing.assert_array_equal(a[:j], b[:j])


@given(st.integers(0, 100_000), st.integers(1, 12))
def test_convexity_in_one_dim(seed, n):
    cfg, w, X, _ = make_head(seed, n=n, d=3, dk=2, dv=1)
    v = (X @ w.W_V[0]).data[:, 0]
    out = attn_matrix_form(X, w, cfg).data[:, 0]
    for i in range(n):
        assert v[: i + 1].min() - 1e-12 <= out[i] <= v[: i + 1].max() + 1e-12


def test_non_causal_uses_all_keys():
    cfg = AttentionConfig(3, 2, 2, causal=False)
    rng = np.random.default_rng(6)
    w = init_attention_weights(cfg, rng, with_output=False)
    X = T.Tensor(rng.normal(size=(4, 3)))
    q, k, v = project(X, w, cfg)
    s = q.data @ k.data.T / np.sqrt(2)
    p = np.exp(s - s.max(1, keepdims=True))
    ref = (p / p.sum(1, keepdims=True)) @ v.data
    np.testing.assert_allclose(attn_matrix_form(X, w, cfg).data, ref, atol=1e-14)
    np.testing.assert_allclose(attn_token_form(X, w, cfg).data, ref, atol=1e-12)


# -- multi-head -----------------------------------------------------------


def test_one_head_equals_single_head_plus_projection():
    cfg = AttentionConfig(3, 2, 2, n_heads=1)
    rng = np.random.default_rng(7)
    w = init_attention_weights(cfg, rng)
    X = T.Tensor(rng.normal(size=(5, 3)))
    ref = attn_matrix_form(X, w, cfg).data @ w.W_O.data
    np.testing.assert_allclose(multi_head_forward(X, w, cfg).data, ref, atol=1e-14)


def test_identity_output_projection_concatenates_heads():
    cfg = AttentionConfig(4, 2, 2, n_heads=2)
    rng = np.random.default_rng(8)
    w = init_attention_weights(cfg, rng)
    w.W_O = T.Tensor(np.eye(4))
    X = T.Tensor(rng.normal(size=(3, 4)))
    heads = [attn_matrix_form(X, w, cfg, head=h).data for h in range(2)]
    np.testing.assert_allclose(multi_head_forward(X, w, cfg).data, np.hstack(heads), atol=1e-14)


@given(st.integers(0, 100_000))
def test_gqa_with_duplicated_weights_equals_mha(seed):
    rng = np.random.default_rng(seed)
    gqa = AttentionConfig(6, 3, 3, n_heads=4, n_kv_heads=2)
    mha = AttentionConfig(6, 3, 3, n_heads=4, n_kv_heads=4)
    wg = init_attention_weights(gqa, rng)
    wm = AttentionWeights(
        W_Q=list(wg.W_Q),
        W_K=[wg.W_K[h // 2] for h in range(4)],
        W_V=[wg.W_V[h // 2] for h in range(4)],
        W_O=wg.W_O,
    )
    X = T.Tensor(rng.normal(size=(5, 6)))
    np.testing.assert_array_equal(multi_head_forward(X, wg, gqa).data, multi_head_forward(X, wm, mha).data)


def test_mha_degeneracy_bit_for_bit():
    cfg = AttentionConfig(4, 2, 2, n_heads=2, n_kv_heads=2)
    rng = np.random.default_rng(9)
    w = init_attention_weights(cfg, rng)
    X = T.Tensor(rng.normal(size=(4, 4)))
    manual = T.concat([attend(*project(X, w, cfg, h)) for h in range(2)], axis=1) @ w.W_O
    np.testing.assert_array_equal(multi_head_forward(X, w, cfg).data, manual.data)


def test_head_count_mismatch():
    cfg = AttentionConfig(4, 2, 2, n_heads=2)
    w = init_attention_weights(cfg, np.random.default_rng(0))
    w.W_Q = w.W_Q[:1]
    with pytest.raises(ShapeError):
        multi_head_forward(T.Tensor(np.ones((2, 4))), w, cfg)


def test_missing_output_projection():
    cfg = AttentionConfig(4, 2, 2, n_heads=2)
    w = init_attention_weights(cfg, np.random.default_rng(0), with_output=False)
    with pytest.raises(ShapeError):
        multi_head_forward(T.Tensor(np.ones((2, 4))), w, cfg)


def test_frozen_weights_excluded_from_gradients():
    cfg, w, X, _ = make_head(10, requires_grad=True)
    w.freeze()
    assert w.frozen and all(not p.requires_grad for p in w.parameters())
    out = attn_matrix_form(X, w, cfg)
    assert not out.requires_grad


def test_batched_attention_matches_per_sequence():
    cfg = AttentionConfig(4, 2, 2, n_heads=2, n_kv_heads=1)
    rng = np.random.default_rng(11)
    w = init_attention_weights(cfg, rng)
    Xb = rng.normal(size=(3, 5, 4))
    batched = multi_head_forward(T.Tensor(Xb), w, cfg).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], multi_head_forward(T.Tensor(Xb[b]), w, cfg).data, atol=1e-14)
