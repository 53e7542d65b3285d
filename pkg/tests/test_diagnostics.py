import numpy as np
import pytest
from hypothesis import given, strategies as st

from prefixlab.diagnostics import (
    bias_matrix,
    bias_spectrum,
    cka,
    covariance_spectrum,
    extract_attention_map,
    alpha_trace,
    hsic,
    jacobi_eigh,
    layer_outputs,
    linear_gram,
    participation_ratio,
    representation_cka,
    singular_values_one_sided,
    spectrum_csv,
)
from prefixlab.model import MethodSpec, Model, ModelConfig
from prefixlab.tensor import ShapeError

TINY = ModelConfig(vocab_size=64, d_model=8, n_layers=2, n_heads=2, d_head=4, ffn_width=16, max_len=32, seed=2)


def random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# -- eigensolvers ---------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_jacobi_matches_numpy_and_reconstructs(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(d + 3, d))
    A = X.T @ X
    vals, vecs = jacobi_eigh(A)
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(A)[::-1], atol=1e-9 * max(1.0, vals[0]))
    assert np.linalg.norm(vecs @ np.diag(vals) @ vecs.T - A) <= 1e-8 * max(1.0, np.linalg.norm(A))
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(d), atol=1e-10)


@given(st.integers(0, 10_000), st.integers(2, 20), st.integers(1, 10))
def test_spectrum_psd_and_descending(seed, n, d):
    dF = np.random.default_rng(seed).normal(size=(n, d))
    rep = covariance_spectrum(dF)
    assert np.all(np.diff(rep.eigenvalues) <= 1e-12)
    assert rep.eigenvalues.min() >= -1e-10


def test_spectrum_cross_checked_by_singular_values():
    rng = np.random.default_rng(0)
    dF = rng.normal(size=(60, 14)) @ np.diag(np.linspace(3, 0.1, 14))
    rep = covariance_spectrum(dF, k=10, with_vectors=True)
    sv = singular_values_one_sided(dF)
    other = sv[:10] ** 2 / (60 - 1)
    assert np.abs(rep.eigenvalues - other).max() / rep.eigenvalues.max() <= 1e-8
    assert np.all(np.abs(rep.eigenvalues - other) <= 1e-8 * np.abs(other))


def test_spectrum_reconstruction():
    rng = np.random.default_rng(1)
    dF = rng.normal(size=(40, 9))
    rep = covariance_spectrum(dF, k=9, with_vectors=True)
    V, lam = rep.eigenvectors, rep.eigenvalues
    assert np.linalg.norm(V @ np.diag(lam) @ V.T - dF.T @ dF / 39) <= 1e-8


def test_rank_one_spectrum():
    u = np.arange(1.0, 6.0)
    dF = np.outer(np.array([1.0, -1.0, 2.0, 0.0]), u)
    lam = covariance_spectrum(dF).eigenvalues
    assert lam[0] == pytest.approx(6.0 * (u @ u) / 3, rel=1e-12)
    assert np.abs(lam[1:]).max() <= 1e-10


def test_constructed_diagonal_spectrum():
    # columns with variances 4 and 1, uncorrelated by construction
    dF = np.array([[2.0, 1.0], [-2.0, 1.0], [2.0, -1.0], [-2.0, -1.0]]) * np.sqrt(3 / 4)
    np.testing.assert_allclose(covariance_spectrum(dF).eigenvalues, [4.0, 1.0], atol=1e-12)


def test_solver_input_checks():
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        jacobi_eigh(np.ones((2, 3)))
    with pytest.raises(ValueError):
        covariance_spectrum(np.ones((1, 3)))


def test_participation_ratio():
    assert participation_ratio([1.0, 1.0, 1.0, 1.0]) == pytest.approx(4.0)
    assert participation_ratio([5.0, 0.0, 0.0]) == pytest.approx(1.0)
    assert participation_ratio([0.0, 0.0]) == 0.0


def test_spectrum_csv_layout():
    text = spectrum_csv({"ptplus": covariance_spectrum(np.eye(3), k=2)})
    lines = text.splitlines()
    assert lines[0] == "# schema: prefixlab-spectrum/v1"
    assert lines[1] == "rank,eigenvalue,method"
    assert len(lines) == 4 and lines[2].startswith("1,")


# -- bias matrix ----------------------------------------------------------


def test_bias_matrix_cases():
    Fb = np.zeros((3, 2))
    Ft = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(bias_matrix(Fb, Ft, normalize=False), Ft)
    out = bias_matrix(Fb, Ft)
    np.testing.assert_allclose(out[:, 0], [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(out[:, 1], 0.0)  # zero spread stays zero
    np.testing.assert_allclose(bias_matrix(Fb, Ft, unit_variance=False)[:, 0], [-1.0, 0.0, 1.0])
    assert np.all(bias_matrix(Ft, Ft) == 0)
    with pytest.raises(ShapeError):
        bias_matrix(np.zeros((3, 2)), np.zeros((2, 3)))


# -- HSIC / CKA -----------------------------------------------------------


def test_hsic_two_point_hand_case():
    # features -1, +1: K = [[1, -1], [-1, 1]] is already centred, tr(K^2) = 4, (m - 1)^2 = 1
    K = linear_gram(np.array([[-1.0], [1.0]]))
    assert abs(hsic(K, K) - 4.0) <= 1e-12


def test_hsic_constant_features_vanish():
    K = linear_gram(np.full((5, 3), 2.0))
    L = linear_gram(np.random.default_rng(0).normal(size=(5, 2)))
    assert abs(hsic(K, L)) <= 1e-12


@given(st.integers(0, 10_000))
def test_hsic_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
    a = hsic(linear_gram(X), linear_gram(Y))
    b = hsic(linear_gram(X + rng.normal(size=3)), linear_gram(Y))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_hsic_input_checks():
    with pytest.raises(ValueError):
        hsic(np.ones((1, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        hsic(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(ShapeError):
        hsic(np.eye(2), np.eye(3))


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_cka_identity_and_invariances(seed, scale):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 6))
    Y = rng.normal(size=(20, 5))
    assert abs(cka(X, X).score - 1.0) <= 1e-10
    Q = random_orthogonal(6, rng)
    assert abs(cka(X @ Q, X).score - 1.0) <= 1e-8
    assert abs(cka(scale * X, Y).score - cka(X, Y).score) <= 1e-8
    assert abs(cka(X, Y).score - cka(Y, X).score) <= 1e-12
    assert 0.0 <= cka(X, Y).score <= 1.0 + 1e-12


def test_cka_degenerate_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        cka(np.ones((4, 2)), np.random.default_rng(0).normal(size=(4, 2)))


# -- model probes ---------------------------------------------------------


def test_single_token_attention_map():
    m = Model.init(TINY)
    amap = extract_attention_map(m, [7], 0, 0)
    np.testing.assert_array_equal(amap.weights, [[1.0]])


def test_attention_rows_are_distributions():
    m = Model.init(TINY).with_method(MethodSpec("prefix", prefix_len=3), seed=1)
    w = extract_attention_map(m, np.arange(9), 1, 1).weights
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    assert np.all(np.triu(w, 1) == 0)


def test_first_layer_prefix_map_equals_base_map():
    # renormalised over real tokens the first prefixed layer sees unchanged inputs
    base = Model.init(TINY)
    toks = np.arange(10)
    for scale in (1e-3, 1.0):
        m = base.with_method(MethodSpec("prefix", prefix_len=4, prefix_scale=scale), seed=0)
        np.testing.assert_allclose(
            extract_attention_map(m, toks, 0, 0).weights, extract_attention_map(base, toks, 0, 0).weights, atol=1e-12
        )


def test_prefix_changes_later_layer_map():
    base = Model.init(TINY)
    m = base.with_method(MethodSpec("prefix", prefix_len=4, prefix_scale=1.0), seed=0)
    toks = np.arange(10)
    diff = np.linalg.norm(extract_attention_map(m, toks, 1, 0).weights - extract_attention_map(base, toks, 1, 0).weights)
    assert diff > 1e-3


def test_map_index_checks():
    m = Model.init(TINY)
    with pytest.raises(IndexError):
        extract_attention_map(m, [1, 2], 2, 0)
    with pytest.raises(IndexError):
        extract_attention_map(m, [1, 2], 0, 5)


def test_alpha_trace_rejects_non_prefix():
    with pytest.raises(ValueError):
        alpha_trace(Model.init(TINY).with_method(MethodSpec("ptplus")), [1, 2], 0, 0)
    with pytest.raises(ValueError):
        alpha_trace(Model.init(TINY).with_method(MethodSpec("prefix", prefix_len=0)), [1, 2], 0, 0)


@pytest.mark.parametrize("p", [1, 3])
def test_alpha_trace_equal_logits(p):
    m = Model.init(TINY).with_method(MethodSpec("prefix", prefix_len=p), seed=0)
    m.params["L0.attn.W_Q.0"].data[:] = 0.0  # every score is zero
    alpha = alpha_trace(m, np.arange(6), 0, 0)
    i = np.arange(6)
    np.testing.assert_allclose(alpha, p / (p + i + 1), atol=1e-14)


def test_alpha_and_input_mass_partition():
    m = Model.init(TINY).with_method(MethodSpec("prefix", prefix_len=2, prefix_scale=1.0), seed=3)
    alpha = alpha_trace(m, np.arange(8), 1, 0)
    assert np.all((alpha > 0) & (alpha < 1))


def test_long_inputs_dilute_prefix_mass():
    m = Model.init(TINY).with_method(MethodSpec("prefix", prefix_len=2, prefix_scale=1.0), seed=3)
    m.params["L0.attn.W_Q.0"].data[:] = 0.0
    alpha = alpha_trace(m, np.arange(30) % 64, 0, 0)
    assert np.all(np.diff(alpha) < 0)


def test_bias_spectrum_and_cka_for_identical_models():
    base = Model.init(TINY)
    same = base.with_method(MethodSpec("ptplus"))
    exs = [np.arange(6), np.arange(6) + 10]
    rep = bias_spectrum(base, same, exs)
    assert np.abs(rep.eigenvalues).max() <= 1e-20
    assert cka_score(base, same, exs) == pytest.approx(1.0, abs=1e-10)
    assert layer_outputs(base, exs).shape == (12, 8)
    with pytest.raises(ValueError):
        layer_outputs(base, exs, kind="logits")


def cka_score(a, b, exs):
    rep = representation_cka(a, b, exs)
    assert rep.layer == 1
    return rep.score
