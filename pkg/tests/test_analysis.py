import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qflow.analysis import (consistency_report, coverage_counts, landscape_grid, sample_metrics, timing_benchmark,
                            write_consistency, write_landscape)
from qflow.envs2d import gen_dataset, mode_assignment
from qflow.flow import FlowPolicy
from qflow.nets import Mlp, MlpSpec
from qflow.values import InterValueNet
from conftest import linear_field


def const_value(c):
    spec = MlpSpec(18, (4,), 1)
    return InterValueNet([Mlp(spec, [np.zeros((18, 4)), np.zeros(4), np.zeros((4, 1)), np.full(1, c)])])


def linear_value(w):
    W = np.zeros((18, 1))
    W[:2, 0] = w
    return InterValueNet([Mlp(MlpSpec(18, (), 1), [W, np.zeros(1)])])


@pytest.fixture(scope="module")
def gauss():
    return gen_dataset("eight_gaussians", 4000, seed=0)


def test_consistency_terminal_entry_is_zero(rng, gauss):
    pol = FlowPolicy.create(2, 0, (16,), "relu", 10, seed=rng)
    v = InterValueNet.create(0, 2, (16,), rng=rng)
    for mode in ("policy", "dataset"):
        rep = consistency_report(v, pol, gauss, 2, 16, np.random.default_rng(0), mode=mode)
        assert rep.mean_normalized[-1] == 0.0 and rep.mean_abs[-1] == 0.0
        assert np.all(rep.mean_normalized >= 0) and rep.n_trajectories == 32
        assert len(rep.taus) == 11


def test_consistency_constant_value(rng, gauss):
    pol = FlowPolicy.create(2, 0, (16,), "relu", 10, seed=rng)
    rep = consistency_report(const_value(0.7), pol, gauss, 1, 32, np.random.default_rng(0))
    assert np.all(rep.mean_normalized == 0.0)


def test_consistency_is_pure(rng, gauss, tmp_path):
    pol = FlowPolicy.create(2, 0, (16,), "relu", 10, seed=rng)
    v = InterValueNet.create(0, 2, (16,), rng=rng)
    a = consistency_report(v, pol, gauss, 1, 64, np.random.default_rng(5))
    b = consistency_report(v, pol, gauss, 1, 64, np.random.default_rng(5))
    assert np.array_equal(a.mean_normalized, b.mean_normalized)
    write_consistency(a, tmp_path)
    rows = (tmp_path / "consistency.csv").read_text().splitlines()
    assert rows[-1].startswith("1.0,0.0,")
    meta = json.loads((tmp_path / "consistency.json").read_text())
    assert "0.1" in meta["denominator"]


def test_landscape_linear_value():
    w = np.array([0.3, -1.2])
    g = landscape_grid(linear_value(w), [0.0, 0.5], 5)
    np.testing.assert_allclose(g.grads, np.broadcast_to(w, g.grads.shape), rtol=1e-15)
    assert landscape_grid(linear_value(w), [0.0], 2).values.shape == (1, 2, 2)
    with pytest.raises(ValueError):
        landscape_grid(linear_value(w), [0.0], 1)


def test_landscape_gradient_vs_finite_differences(rng):
    v = InterValueNet.create(0, 2, (32, 32), "gelu", rng=rng)
    grid = landscape_grid(v, [0.3], 21)
    h = 1e-6
    picks = rng.integers(0, 21, size=(100, 2))
    for i, j in picks:
        p = np.array([[grid.xs[j], grid.ys[i]]])
        fd = [(v(None, p + e, 0.3) - v(None, p - e, 0.3))[0] / (2 * h) for e in (np.array([h, 0]), np.array([0, h]))]
        got = grid.grads[0, i, j]
        assert np.all(np.abs(got - fd) <= 1e-3 * np.maximum(np.abs(fd), 1e-3))


def test_write_landscape_files(tmp_path):
    files = write_landscape(landscape_grid(linear_value([1.0, 0.0]), [0, 0.25, 0.5, 0.75, 1], 4), tmp_path)
    assert len([f for f in files.values() if f.startswith("landscape_tau")]) == 5
    assert all((tmp_path / f).exists() for f in files.values())


def test_sample_metrics_on_dataset_points(gauss):
    m = sample_metrics(lambda n, r: gauss.actions[:n], gauss, gauss.reward_spec, 1000, None)
    assert m["on_manifold_frac"] == 1.0
    assert set(m) == {"mean_reward", "on_manifold_frac", "mode_coverage"}
    with pytest.raises(ValueError):
        sample_metrics(lambda n, r: np.zeros((0, 2)), gauss, gauss.reward_spec, 0, None)


def test_zero_field_mode_coverage_matches_assignment(gauss):
    pol = linear_field(np.zeros((2, 2)))
    from qflow.flow import sample_action

    sampler = lambda n, r: sample_action(pol, None, r, n=n)
    m = sample_metrics(sampler, gauss, gauss.reward_spec, 4096, np.random.default_rng(0))
    x = sampler(4096, np.random.default_rng(0))
    counts = np.bincount(mode_assignment(x, gauss.norm), minlength=8)
    assert m["mode_coverage"] == int(np.sum(counts >= 0.02 * 4096))
    assert m["mode_coverage"] == 8  # N(0, I) in normalized units spreads over all directions


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_sample_metrics_permutation_invariant(seed):
    ds = gen_dataset("moons", 1000, seed=1)
    x = np.random.default_rng(seed).uniform(-1.2, 1.2, size=(300, 2))
    perm = np.random.default_rng(seed + 1).permutation(300)
    a = sample_metrics(lambda n, r: x, ds, ds.reward_spec, 300, None)
    b = sample_metrics(lambda n, r: x[perm], ds, ds.reward_spec, 300, None)
    assert a["on_manifold_frac"] == b["on_manifold_frac"] and a["mode_coverage"] == b["mode_coverage"]
    assert a["mean_reward"] == pytest.approx(b["mean_reward"], rel=1e-12)


def test_coverage_counts_curves():
    ds = gen_dataset("two_spirals", 4000, seed=0)
    c = coverage_counts(ds.actions, ds)
    assert len(c) == 16 and c.sum() == len(ds)
    assert np.all(c > 0)


def test_timing_benchmark_shape():
    rows = timing_benchmark(["qflow"], [2, 4], steps=2, warmup=1, policy_hidden=(8,), value_hidden=(8,), batch_size=16)
    assert [(r["method"], r["flow_steps"]) for r in rows] == [("qflow", 2), ("qflow", 4)]
    assert all(r["ms_per_step"] > 0 for r in rows)
    with pytest.raises(ValueError):
        timing_benchmark(["qflow"], [2], steps=0)
