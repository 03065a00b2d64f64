import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qflow.autodiff import ContractViolation, NonFiniteError, Tape, finite_difference, gelu
from conftest import grad_close


def test_forward_values():
    t = Tape()
    assert np.array_equal(t.relu(t.constant([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])
    out = t.matmul(t.constant(np.eye(2)), t.constant([[3.0], [4.0]]))
    assert np.array_equal(out.value, [[3.0], [4.0]])
    assert t.gelu(t.constant(0.0)).value == 0.0


def test_shape_mismatch_names_both_shapes():
    t = Tape()
    with pytest.raises(ContractViolation, match=r"\(2, 3\).*\(2, 3\)"):
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    with pytest.raises(ContractViolation):
        t.add(t.constant(np.ones(3)), t.constant(np.ones(4)))
    with pytest.raises(ContractViolation):
        t.concat([t.constant(np.ones((2, 2))), t.constant(np.ones((3, 3)))], axis=1)


def test_non_finite_rejected():
    t = Tape()
    with pytest.raises(NonFiniteError):
        t.variable([1.0, np.nan])
    unchecked = Tape(check_finite=False)
    unchecked.variable([np.inf])


def test_square_and_relu_derivatives():
    t = Tape()
    x = t.variable(3.0)
    assert t.backward(t.square(x))[x] == 6.0
    t = Tape()
    x = t.variable([-1.0, 2.0])
    assert np.array_equal(t.backward(t.sum(t.relu(x)))[x], [0.0, 1.0])


def test_product_rule_and_minimum():
    t = Tape()
    x, y = t.variable(2.0), t.variable(5.0)
    assert t.grad_wrt_input(t.mul(x, y), x) == 5.0
    c = np.array([0.3, -1.2])
    t = Tape()
    x = t.variable(c.copy())
    g = t.grad_wrt_input(t.sum(t.square(t.sub(x, c))), x)
    assert np.array_equal(g, [0.0, 0.0])


def test_non_scalar_root_and_foreign_nodes():
    t = Tape()
    x = t.variable(np.ones(3))
    with pytest.raises(ContractViolation):
        t.backward(t.relu(x))
    other = Tape()
    z = other.variable(1.0)
    with pytest.raises(KeyError):
        t.grad_wrt_input(t.sum(x), z)
    with pytest.raises(KeyError):
        t.backward(t.sum(x))[z]


def test_unreachable_leaf_gets_zero_gradient():
    t = Tape()
    x, y = t.variable(np.ones(2)), t.variable(np.ones(3))
    g = t.backward(t.sum(x))
    assert np.array_equal(g[y], np.zeros(3))


def test_shared_subexpression_accumulates():
    t = Tape()
    x = t.variable(1.5)
    y = t.add(t.square(x), t.scale(x, 4.0))
    z = t.mul(y, y)
    # dz/dx = 2y * (2x + 4)
    yv = 1.5**2 + 6.0
    assert t.backward(z)[x] == pytest.approx(2 * yv * (3.0 + 4.0), rel=1e-15)


def _mlp_loss(x, W1, b1, W2, act):
    t = Tape()
    nodes = [t.variable(v) for v in (x, W1, b1, W2)]
    h = t.forward_op(act, t.add(t.matmul(nodes[0], nodes[1]), nodes[2]))
    out = t.mean(t.square(t.matmul(h, nodes[3])))
    return t, nodes, out


@pytest.mark.parametrize("act", ["relu", "gelu"])
def test_two_layer_mlp_matches_finite_differences(rng, act):
    x, W1, b1, W2 = rng.normal(size=(5, 3)), rng.normal(size=(3, 7)), rng.normal(size=7), rng.normal(size=(7, 2))
    t, nodes, out = _mlp_loss(x, W1, b1, W2, act)
    grads = t.backward(out).get(nodes)
    vals = [x, W1, b1, W2]
    for i in range(4):
        def f(v, i=i):
            args = list(vals)
            args[i] = v
            return float(_mlp_loss(*args, act)[2].value)

        assert grad_close(grads[i], finite_difference(f, vals[i]))


def test_quadratic_fit_critic_gradient(rng):
    # fit q(x) = 1 - x^2 with a small network by least squares on the last layer,
    # then check the input gradient against finite differences
    xs = np.linspace(-1, 1, 64)[:, None]
    W1, b1 = rng.normal(size=(1, 32)), rng.normal(size=32)
    H = np.maximum(xs @ W1 + b1, 0)
    w2, *_ = np.linalg.lstsq(np.c_[H, np.ones(64)], 1 - xs[:, 0] ** 2, rcond=None)

    def q(xv):
        t = Tape()
        x = t.variable(xv)
        h = t.relu(t.add(t.matmul(x, t.constant(W1)), t.constant(b1)))
        out = t.sum(t.add(t.matmul(h, t.constant(w2[:-1, None])), t.constant(w2[-1])))
        return t, x, out

    probe = rng.uniform(-0.9, 0.9, size=(6, 1))
    t, x, out = q(probe)
    g = t.grad_wrt_input(out, x)
    fd = finite_difference(lambda v: float(q(v)[2].value), probe)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    xv = r.normal(size=(3, 4))
    W = r.normal(size=(4, 2))

    def build(ca, cb):
        t = Tape()
        x = t.variable(xv)
        f = t.sum(t.square(t.matmul(x, t.constant(W))))
        g = t.mean(t.gelu(x))
        return t, x, t.add(t.scale(f, ca), t.scale(g, cb))

    t, x, root = build(a, b)
    combined = t.grad_wrt_input(root, x)
    t1, x1, r1 = build(1.0, 0.0)
    t2, x2, r2 = build(0.0, 1.0)
    sep = a * t1.grad_wrt_input(r1, x1) + b * t2.grad_wrt_input(r2, x2)
    np.testing.assert_allclose(combined, sep, rtol=1e-12, atol=1e-12)


def test_determinism_bit_identical(rng):
    xv = rng.normal(size=(4, 4))

    def run():
        t = Tape()
        x = t.variable(xv)
        return t.backward(t.mean(t.gelu(t.matmul(x, x))))[x]

    assert np.array_equal(run(), run())


def test_euler_chain_rule_on_linear_field():
    # x_{k+1} = (I + h A) x_k, so d(w . x_K)/dx_0 = ((I + h A)^K)^T w
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    w = np.array([0.7, -0.2])
    K, h = 7, 1 / 7
    t = Tape()
    x0 = t.variable(np.array([[1.0, 0.5]]))
    x = x0
    for _ in range(K):
        x = t.add(x, t.scale(t.matmul(x, t.constant(A.T)), h))
    g = t.grad_wrt_input(t.sum(t.matmul(x, t.constant(w[:, None]))), x0)
    M = np.linalg.matrix_power(np.eye(2) + h * A, K)
    np.testing.assert_allclose(g[0], M.T @ w, rtol=1e-13)


def test_broadcast_and_sum_axis(rng):
    v = rng.normal(size=(1, 3))

    def f(val):
        t = Tape()
        x = t.variable(val)
        return t, x, t.sum(t.square(t.sum(t.broadcast(x, (4, 3)), axis=0, keepdims=True)))

    t, x, out = f(v)
    assert grad_close(t.grad_wrt_input(out, x), finite_difference(lambda z: float(f(z)[2].value), v))


def test_gelu_matches_tanh_form():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(gelu(x), ref, rtol=1e-15)
