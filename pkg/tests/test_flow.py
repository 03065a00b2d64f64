import numpy as np
import pytest
from scipy.linalg import expm

from qflow.autodiff import ContractViolation, Tape, finite_difference
from qflow.envs2d import gen_dataset
from qflow.flow import (Batch, FlowPolicy, IntegrationError, cfm_loss, draw_path, euler_schedule,
                        flow_map, integrate, interp_path, matching_loss, sample_action)
from qflow.nets import Mlp
from conftest import grad_close, linear_field

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def test_interp_path_examples():
    x, u = interp_path([[0.0, 0.0]], [[2.0, 2.0]], [0.5])
    assert np.array_equal(x, [[1.0, 1.0]]) and np.array_equal(u, [[2.0, 2.0]])
    x0, x1 = np.array([[1.0, -2.0]]), np.array([[3.0, 4.0]])
    assert np.array_equal(interp_path(x0, x1, [0.0])[0], x0)
    assert np.array_equal(interp_path(x0, x1, [1.0])[0], x1)
    c = np.array([[0.3, 0.7]])
    for t in (0.0, 0.25, 1.0):
        x, u = interp_path(c, c, [t])
        np.testing.assert_allclose(x, c, rtol=1e-15)
        assert not u.any()
    with pytest.raises(ContractViolation):
        interp_path(x0, x1, [1.2])


def test_constant_field_is_exact():
    pol = linear_field(np.zeros((2, 2)), b=[1.0, 0.0])
    for k in (1, 3, 25, 64):
        pol.n_steps = k
        out = flow_map(pol, np.zeros((1, 2)), 0.0)
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-14)


def test_tau_one_is_identity():
    pol = linear_field(ROT)
    x = np.array([[0.4, -0.1]])
    assert np.array_equal(flow_map(pol, x, 1.0), x)
    t0, k, dt = euler_schedule(1.0, 1.0, 25, 1)
    assert k[0] == 1 and dt[0] == 0.0


def test_rotation_matches_matrix_exponential():
    pol = linear_field(ROT, n_steps=200)
    out = flow_map(pol, np.array([[1.0, 0.0]]), 0.0)
    assert np.linalg.norm(out[0] - [np.cos(1.0), np.sin(1.0)]) < 5e-3
    np.testing.assert_allclose(expm(ROT) @ [1.0, 0.0], [np.cos(1.0), np.sin(1.0)], rtol=1e-14)


def test_euler_is_first_order(rng):
    starts = rng.normal(size=(8, 2))
    exact = starts @ expm(ROT).T
    errs = []
    for k in (50, 100, 200, 400):
        pol = linear_field(ROT, n_steps=k)
        errs.append(np.max(np.linalg.norm(flow_map(pol, starts, 0.0) - exact, axis=1)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 1.7) & (ratios <= 2.3)), ratios


def test_schedule_rounding():
    t0, k, dt = euler_schedule(np.array([0.0, 0.5, 0.98, 0.3]), 1.0, 25, 4)
    assert k.tolist() == [25, 13, 1, 18]  # 12.5 rounds half-up
    np.testing.assert_allclose(k * dt, [1.0, 0.5, 0.02, 0.7], rtol=1e-14)
    with pytest.raises(ContractViolation):
        euler_schedule(0.6, 0.5, 25, 1)


def _policy(rng, hidden=(16, 16), n_steps=8, act="gelu"):
    return FlowPolicy.create(2, 0, hidden, act, n_steps, seed=rng)


def test_semigroup_bit_exact(rng):
    pol = _policy(rng)
    x = rng.normal(size=(32, 2))
    direct = integrate(pol, x, 0.0, 1.0)
    split = integrate(pol, integrate(pol, x, 0.0, 0.5), 0.5, 1.0)
    assert np.array_equal(direct, split)


def test_tape_and_numpy_rollouts_agree(rng):
    pol = _policy(rng, n_steps=25)
    x = rng.normal(size=(16, 2))
    tau = rng.random(16)
    t = Tape()
    on = integrate(pol, x, tau, 1.0, tape=t, params=pol.net.bind(t))
    assert np.array_equal(on.value, integrate(pol, x, tau, 1.0))


def test_bptt_gradient_matches_finite_differences(rng):
    pol = _policy(rng, hidden=(4,), n_steps=5)
    x0 = rng.normal(size=(3, 2))
    tau = np.array([0.0, 0.3, 0.9])
    w = rng.normal(size=(2, 1))

    def loss(theta_idx, value):
        params = [p.copy() for p in pol.net.params]
        params[theta_idx] = value
        net = Mlp(pol.net.spec, params)
        p2 = FlowPolicy(net, 2, 0, pol.n_steps)
        return float(np.sum(integrate(p2, x0, tau) @ w))

    t = Tape()
    params = pol.net.bind(t)
    out = t.sum(t.matmul(integrate(pol, x0, tau, tape=t, params=params), t.constant(w)))
    grads = t.backward(out).get(params)
    for i, p in enumerate(pol.net.params):
        assert grad_close(grads[i], finite_difference(lambda v, i=i: loss(i, v), p))


@pytest.mark.filterwarnings("ignore:overflow")
def test_integration_error_names_step():
    pol = linear_field(np.eye(2) * 1e200, n_steps=4)
    with pytest.raises(IntegrationError, match="step"):
        flow_map(pol, np.ones((1, 2)) * 1e200, 0.0)


def test_zero_field_gives_standard_normal(rng):
    pol = linear_field(np.zeros((2, 2)))
    a = sample_action(pol, None, np.random.default_rng(3), n=10_000)
    assert np.array_equal(a, np.random.default_rng(3).standard_normal((10_000, 2)))
    assert np.all(np.abs(a.mean(axis=0)) < 0.1)
    assert np.linalg.norm(np.cov(a.T) - np.eye(2)) < 0.1


def test_sample_action_deterministic(rng):
    pol = _policy(rng)
    s = np.zeros((5, 0))
    assert np.array_equal(sample_action(pol, s, np.random.default_rng(1)), sample_action(pol, s, np.random.default_rng(1)))


def test_matching_loss_zero_for_perfect_field(rng):
    pol = _policy(rng)
    x, tau = rng.normal(size=(10, 2)), rng.random(10)
    t = Tape()
    target = pol.velocity(x, tau)
    assert matching_loss(pol, t, pol.net.bind(t), x, tau, np.zeros((10, 0)), target).value == 0.0


def test_cfm_loss_nonnegative_and_differentiable(rng):
    pol = FlowPolicy.create(2, 0, (2,), "gelu", 8, seed=rng)
    batch = Batch.bandit(rng.normal(size=(7, 2)))
    draw = draw_path(rng, batch.a)

    def f(i, v):
        params = [p.copy() for p in pol.net.params]
        params[i] = v
        p2 = FlowPolicy(Mlp(pol.net.spec, params), 2, 0, 8)
        return float(cfm_loss(p2, batch, None, draw=draw).value)

    t = Tape()
    params = pol.net.bind(t)
    loss = cfm_loss(pol, batch, None, tape=t, params=params, draw=draw)
    assert loss.value >= 0
    grads = t.backward(loss).get(params)
    for i, p in enumerate(pol.net.params):
        assert grad_close(grads[i], finite_difference(lambda v, i=i: f(i, v), p))


def test_untrained_loss_matches_monte_carlo_oracle():
    ds = gen_dataset("eight_gaussians", 10_000, seed=0)
    pol = FlowPolicy.create(2, 0, (512, 512, 512, 512, 256), "relu", 25, seed=0)
    mc = np.random.default_rng(99)
    x1 = ds.actions[mc.integers(0, len(ds), 100_000)]
    oracle = np.mean(np.sum((x1 - mc.standard_normal(x1.shape)) ** 2, axis=1))
    r = np.random.default_rng(5)
    batch = Batch.bandit(ds.actions[r.integers(0, len(ds), 256)])
    loss = float(cfm_loss(pol, batch, r).value)
    assert abs(loss - oracle) <= 0.2 * oracle


def test_empty_batch_rejected(rng):
    with pytest.raises(ContractViolation):
        cfm_loss(_policy(rng), Batch.bandit(np.zeros((0, 2))), rng)
