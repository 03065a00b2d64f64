import numpy as np
import pytest

from qflow.flow import FlowPolicy
from qflow.nets import Mlp, MlpSpec


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Elementwise relative error below ``rtol`` except where both sides are tiny."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    return bool(np.all((err <= atol) | (err <= rtol * scale)))


def linear_field(A, b=None, n_steps=25, embed_dim=16) -> FlowPolicy:
    """Flow policy whose velocity is exactly ``x @ A.T + b`` (no tau dependence)."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    spec = MlpSpec(d + embed_dim, (), d)
    W = np.zeros((d + embed_dim, d))
    W[:d] = A.T
    bias = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
    return FlowPolicy(Mlp(spec, [W, bias]), d, 0, n_steps, embed_dim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
