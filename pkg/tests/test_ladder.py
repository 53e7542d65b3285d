import numpy as np
import pytest

from prefixlab import tensor as T
from prefixlab.ladder import flat_linear_prefix_attention, format_table, make_instances, run_ladder
from prefixlab.peft import FeatureMapSpec, feature_map_eval


def test_instances_cover_edges():
    inst = make_instances(0, 100)
    assert len(inst) == 100
    assert (inst[0].n, inst[0].p) == (1, 0)
    assert inst[1].n == 1 and inst[1].p == 1
    assert inst[2].p == 0
    assert max(i.n for i in inst) <= 16 and max(i.p for i in inst) <= 8 and max(i.d_k for i in inst) <= 8


def test_flat_oracle_matches_direct_sum():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    pk, pv = rng.normal(size=(2, 2)), rng.normal(size=(2, 4))
    phi = FeatureMapSpec()
    f = lambda x: feature_map_eval(phi, T.Tensor(x)).data
    out = flat_linear_prefix_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), T.Tensor(pk), T.Tensor(pv), phi)
    i = 2
    keys = np.vstack([pk, k[: i + 1]])
    vals = np.vstack([pv, v[: i + 1]])
    w = f(keys) @ f(q[i])
    np.testing.assert_allclose(out[i], w @ vals / w.sum(), atol=1e-14)


def test_default_ladder_passes():
    rungs = run_ladder(seed=0, count=100)
    assert len(rungs) == 4
    for r in rungs:
        assert r.passed and r.count == 100 and r.max_dev < 1e-10, format_table(rungs)


def test_injected_fault_is_caught():
    rungs = run_ladder(seed=0, count=10, fault="decomposition")
    failed = [r for r in rungs if not r.passed]
    assert len(failed) == 1 and "decomposed" in failed[0].name
    assert failed[0].failure["index"] == 0 and "instance" in failed[0].failure
    assert "FAIL" in format_table(rungs)


def test_unknown_fault_rejected():
    with pytest.raises(ValueError):
        run_ladder(count=1, fault="softmax")
