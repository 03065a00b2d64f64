import inspect

import numpy as np
import pytest

from qflow import values
from qflow.autodiff import ContractViolation, Tape
from qflow.flow import Batch, draw_path
from qflow.nets import Mlp, MlpSpec, init_mlp
from qflow.values import (CriticEnsemble, InterValueNet, aggregate, critic_loss, inter_value_loss,
                          inter_value_target, q_value)
from conftest import linear_field


def const_net(in_dim, c):
    spec = MlpSpec(in_dim, (3,), 1)
    return Mlp(spec, [np.zeros((in_dim, 3)), np.zeros(3), np.zeros((3, 1)), np.full(1, float(c))])


def test_aggregate_definitions():
    one, three = np.array([1.0]), np.array([3.0])
    assert aggregate([one, three], "mean")[0] == 2.0
    assert aggregate([one, three], "min")[0] == 1.0
    assert aggregate([three, three], "mean")[0] == 3.0
    with pytest.raises(ContractViolation):
        aggregate([one], "max")


def test_min_aggregation_routes_gradient_to_argmin():
    t = Tape()
    a, b = t.variable([1.0, 5.0]), t.variable([3.0, 2.0])
    g = t.backward(t.sum(aggregate([a, b], "min", t)))
    assert np.array_equal(g[a], [1.0, 0.0]) and np.array_equal(g[b], [0.0, 1.0])


def test_bandit_critic_fixed_point():
    c = CriticEnsemble([const_net(2, 1.0), const_net(2, 1.0)])
    batch = Batch.bandit(np.zeros((4, 2)), np.ones(4))
    assert critic_loss(c, batch, None).value == 0.0


def test_bootstrapped_target_arithmetic():
    c = CriticEnsemble([const_net(2, 0.99)], targets=[const_net(2, 1.0)], gamma=0.99)
    batch = Batch(np.zeros((3, 0)), np.zeros((3, 2)), np.zeros(3), np.zeros((3, 0)), np.zeros(3))
    assert critic_loss(c, batch, np.zeros((3, 2))).value == pytest.approx(0.0, abs=1e-30)
    with pytest.raises(ContractViolation):
        critic_loss(c, batch, None)


def test_critic_loss_zero_iff_all_members_hit_target():
    batch = Batch.bandit(np.zeros((4, 2)), np.ones(4))
    assert critic_loss(CriticEnsemble([const_net(2, 1.0), const_net(2, 0.5)]), batch, None).value > 0


def test_ensemble_of_clones_matches_single(rng):
    m = init_mlp(MlpSpec(2, (8,), 1), rng)
    batch = Batch.bandit(rng.normal(size=(16, 2)), rng.random(16))
    single = critic_loss(CriticEnsemble([m.copy()]), batch, None).value
    double = critic_loss(CriticEnsemble([m.copy(), m.copy()]), batch, None).value
    assert single == double
    v1 = InterValueNet([init_mlp(MlpSpec(18, (8,), 1), 3)])
    v2 = InterValueNet([v1.members[0].copy(), v1.members[0].copy()])
    c = CriticEnsemble([m])
    pol = linear_field(np.zeros((2, 2)))
    draw = draw_path(rng, batch.a)
    assert (inter_value_loss(v1, c, pol, batch, draw=draw).value
            == inter_value_loss(v2, c, pol, batch, draw=draw).value)


def test_inter_value_target_boundaries(rng):
    c = CriticEnsemble.create(0, 2, (8,), rng=rng)
    x = rng.normal(size=(6, 2))
    zero = linear_field(np.zeros((2, 2)))
    tau = rng.random(6)
    np.testing.assert_array_equal(inter_value_target(c, zero, np.zeros((6, 0)), x, tau),
                                  q_value(c, np.zeros((6, 0)), x, use_target=True))
    anyfield = linear_field(np.array([[0.0, -1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(inter_value_target(c, anyfield, np.zeros((6, 0)), x, np.ones(6)),
                                  q_value(c, np.zeros((6, 0)), x, use_target=True))


def test_inter_value_target_is_detached(rng):
    c = CriticEnsemble.create(0, 2, (8,), rng=rng)
    v = InterValueNet.create(0, 2, (8,), rng=rng)
    pol = linear_field(np.array([[0.1, 0.0], [0.0, -0.2]]))
    batch = Batch.bandit(rng.normal(size=(5, 2)))
    draw = draw_path(rng, batch.a)
    y0 = inter_value_target(c, pol, batch.s, draw.x_tau, draw.tau)
    for m in v.members:
        for p in m.params:
            p += 0.5
    assert np.array_equal(inter_value_target(c, pol, batch.s, draw.x_tau, draw.tau), y0)
    # the tape only holds value-net parameters as trainable leaves
    t = Tape()
    plist = [m.bind(t) for m in v.members]
    loss = inter_value_loss(v, c, pol, batch, tape=t, params_list=plist, draw=draw)
    trainable = [n for n in t.nodes if n.requires_grad and not n.inputs]
    assert len(trainable) == sum(len(p) for p in plist)
    assert loss.value >= 0


def test_target_depends_only_on_terminal_critic():
    src = inspect.getsource(values.inter_value_target)
    assert "reward" not in src and ".r" not in src


def test_grad_x_matches_finite_differences(rng):
    v = InterValueNet.create(0, 2, (16, 16), "gelu", rng=rng)
    x = rng.normal(size=(4, 2))
    g = v.grad_x(None, x, 0.4)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (v(None, x + e, 0.4) - v(None, x - e, 0.4)) / (2 * h)
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-5, atol=1e-9)


def test_bandit_critic_learns_reward(rng):
    # small critic trained on a smooth reward; the estimate matches at data points
    from qflow.envs2d import gen_dataset
    from qflow.nets import adam_step

    ds = gen_dataset("swiss_roll", 2000, seed=1)
    c = CriticEnsemble.create(0, 2, (64, 64), rng=rng, lr=3e-3)
    for _ in range(1500):
        idx = rng.integers(0, len(ds), 256)
        batch = Batch.bandit(ds.actions[idx], ds.rewards[idx])
        t = Tape()
        plist = [m.bind(t) for m in c.members]
        g = t.backward(critic_loss(c, batch, None, t, plist))
        for m, p, o in zip(c.members, plist, c.opts):
            adam_step(m.params, g.get(p), o)
    mae = np.mean(np.abs(q_value(c, np.zeros((len(ds), 0)), ds.actions) - ds.rewards))
    assert mae < 0.05
