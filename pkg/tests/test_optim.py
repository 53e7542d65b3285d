import numpy as np
import pytest
from hypothesis import given, strategies as st

from prefixlab import tensor as T
from prefixlab.optim import OptimizerSpec, OptimizerState, adamw_step, clip_global_norm


def reference_adamw(x, grads, lr, b1, b2, eps, wd):
    """Plain-python AdamW over a list of per-step gradients."""
    x = [float(v) for v in x]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    out = []
    for t, g in enumerate(grads, start=1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] = x[i] * (1 - lr * wd) - lr * mh / (vh**0.5 + eps)
        out.append(list(x))
    return out


def test_presets():
    desk = OptimizerSpec.preset("desk")
    assert (desk.lr, desk.max_steps, desk.batch_size) == (3e-4, 500, 2)
    app = OptimizerSpec.preset("paper-appendix")
    assert (app.lr, app.max_steps) == (2e-5, 4000)
    with pytest.raises(ValueError):
        OptimizerSpec.preset("nope")


def test_zero_gradient_without_decay_is_identity():
    p = T.param(np.arange(6.0).reshape(2, 3))
    before = p.data.copy()
    adamw_step({"p": p}, {"p": np.zeros((2, 3))}, OptimizerState(), OptimizerSpec(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, before)


def test_first_step_is_signed_lr():
    rng = np.random.default_rng(0)
    g = rng.normal(size=10)
    p = T.param(np.zeros(10))
    spec = OptimizerSpec(lr=1e-3, weight_decay=0.0, eps=0.0)
    adamw_step({"p": p}, {"p": g}, OptimizerState(), spec)
    np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_three_step_trace_matches_reference(seed, wd):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    spec = OptimizerSpec(lr=1e-2, weight_decay=wd)
    ref = reference_adamw(x0, grads, spec.lr, spec.beta1, spec.beta2, spec.eps, wd)
    p = T.param(x0.copy())
    st_ = OptimizerState()
    for t, g in enumerate(grads):
        adamw_step({"p": p}, {"p": g}, st_, spec)
        assert np.abs(p.data - np.array(ref[t])).max() <= 1e-12
    assert st_.step == 3


@given(st.integers(1, 40), st.floats(1e-4, 1e-1), st.floats(0.0, 1.0))
def test_decoupled_decay_contraction_is_exact(steps, lr, wd):
    x0 = np.array([1.5, -2.0, 0.25])
    p = T.param(x0.copy())
    spec = OptimizerSpec(lr=lr, weight_decay=wd)
    st_ = OptimizerState()
    expected = x0.copy()
    for _ in range(steps):
        adamw_step({"p": p}, {"p": np.zeros(3)}, st_, spec)
        expected *= 1.0 - lr * wd
    np.testing.assert_array_equal(p.data, expected)


def test_quadratic_descends_monotonically():
    target = np.array([3.0, -1.0, 0.5])
    p = T.param(np.zeros(3))
    spec = OptimizerSpec(lr=1e-3, weight_decay=0.0)
    st_ = OptimizerState()
    losses = []
    for _ in range(200):
        losses.append(float(((p.data - target) ** 2).sum()))
        adamw_step({"p": p}, {"p": 2 * (p.data - target)}, st_, spec)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_shape_and_finiteness_checked():
    p = T.param(np.zeros(3))
    with pytest.raises(T.ShapeError):
        adamw_step({"p": p}, {"p": np.zeros(4)}, OptimizerState(), OptimizerSpec())
    with pytest.raises(T.NonFiniteError):
        adamw_step({"p": p}, {"p": np.array([0.0, np.nan, 0.0])}, OptimizerState(), OptimizerSpec())
    with pytest.raises(ValueError):
        adamw_step({"p": p}, {}, OptimizerState(), OptimizerSpec())


def test_rejected_step_leaves_state_untouched():
    p, q = T.param(np.ones(2)), T.param(np.ones(2))
    st_ = OptimizerState()
    with pytest.raises(T.NonFiniteError):
        adamw_step({"p": p, "q": q}, {"p": np.ones(2), "q": np.array([np.inf, 0.0])}, st_, OptimizerSpec())
    assert st_.step == 0
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    total = np.sqrt(sum((g**2).sum() for g in grads.values()))
    assert total == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1
