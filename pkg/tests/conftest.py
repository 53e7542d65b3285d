import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prefixlab import tensor as T
from prefixlab.attention import AttentionConfig, init_attention_weights

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_head(seed, n=4, d=3, dk=2, dv=None, requires_grad=False):
    """Random single-head weights and input."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(d, dk, dv or dk)
    w = init_attention_weights(cfg, rng, with_output=False, requires_grad=requires_grad)
    X = T.Tensor(rng.normal(size=(n, d)))
    return cfg, w, X, rng


@pytest.fixture
def head():
    return make_head


def grad_check(f, x, h=1e-5):
    """Relative error between autodiff and central differences for scalar ``f``."""
    xt = T.param(np.array(x, dtype=float))
    f(xt).backward()
    return T.relative_error(xt.grad, T.finite_diff(f, x, h))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
