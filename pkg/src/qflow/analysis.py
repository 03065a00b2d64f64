"""Measurements on trained runs: flow consistency, value landscapes,
sample quality and training cost."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .envs2d import OfflineDataset2D, RewardSpec, local_progress, mode_assignment, n_components, support_distance
from .flow import FlowPolicy, flow_map, integrate, interp_path
from .svg import heatmap_svg, quiver_svg
from .values import InterValueNet

__all__ = [
    "ConsistencyReport",
    "LandscapeGrid",
    "consistency_report",
    "landscape_grid",
    "sample_metrics",
    "coverage_counts",
    "timing_benchmark",
    "write_consistency",
    "write_landscape",
]

DENOM_FLOOR = 0.1
COVERAGE_SHARE = 0.02
SEGMENTS_PER_COMPONENT = 8


@dataclass
class ConsistencyReport:
    taus: np.ndarray
    mean_normalized: np.ndarray
    std_normalized: np.ndarray
    mean_abs: np.ndarray
    std_abs: np.ndarray
    n_trajectories: int
    floor: float = DENOM_FLOOR
    mode: str = "policy"

    def spearman(self) -> float:
        """Rank correlation between flow time and the mean normalized difference."""
        return float(spearmanr(self.taus, self.mean_normalized).statistic)

    def to_dict(self) -> dict:
        return {
            "taus": self.taus.tolist(),
            "mean_normalized": self.mean_normalized.tolist(),
            "std_normalized": self.std_normalized.tolist(),
            "mean_abs": self.mean_abs.tolist(),
            "std_abs": self.std_abs.tolist(),
            "n_trajectories": self.n_trajectories,
            "mode": self.mode,
            "denominator": f"max(|V(s, x1_hat, 1)|, {self.floor})",
            "spearman_tau_vs_mean": self.spearman(),
        }


def consistency_report(v: InterValueNet, policy: FlowPolicy, dataset: OfflineDataset2D | None, n_states: int,
                       n_trajs: int, rng: np.random.Generator, taus=None, mode: str = "policy",
                       floor: float = DENOM_FLOOR, states: np.ndarray | None = None) -> ConsistencyReport:
    """Compare ``V(s, x_tau, tau)`` with ``V(s, Psi(x_tau), 1)`` on a grid of flow times.

    ``mode="policy"`` takes ``x_tau`` from policy rollouts started at
    ``x0 ~ N(0, I)``; ``mode="dataset"`` uses straight dataset paths. The
    2D tasks have one fixed state, so ``n_states * n_trajs`` rollouts share
    it unless ``states`` is given.
    """
    taus = np.linspace(0.0, 1.0, 11) if taus is None else np.asarray(taus, dtype=np.float64)
    n = n_states * n_trajs
    s = np.zeros((n, policy.state_dim)) if states is None else np.repeat(states, n_trajs, axis=0)
    x0 = rng.standard_normal((n, policy.action_dim))
    if mode == "dataset":
        x1 = dataset.actions[rng.integers(0, len(dataset), size=n)]
    elif mode != "policy":
        raise ValueError(f"unknown consistency mode {mode!r}")
    stats = {k: [] for k in ("mn", "sn", "ma", "sa")}
    for tau in taus:
        if mode == "policy":
            x_tau = integrate(policy, x0, 0.0, tau, s) if tau > 0 else x0
        else:
            x_tau, _ = interp_path(x0, x1, np.full(n, tau))
        x1_hat = x_tau if tau == 1.0 else flow_map(policy, x_tau, tau, s)
        v_tau = v(s, x_tau, tau)
        v_end = v(s, x1_hat, 1.0)
        diff = np.abs(v_tau - v_end)
        normed = diff / np.maximum(np.abs(v_end), floor)
        stats["mn"].append(normed.mean())
        stats["sn"].append(normed.std())
        stats["ma"].append(diff.mean())
        stats["sa"].append(diff.std())
    return ConsistencyReport(taus, *(np.array(stats[k]) for k in ("mn", "sn", "ma", "sa")), n, floor, mode)


def write_consistency(rep: ConsistencyReport, sink) -> dict[str, str]:
    sink = Path(sink)
    with open(sink / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "mean_normalized", "std_normalized", "mean_abs", "std_abs"])
        for row in zip(rep.taus, rep.mean_normalized, rep.std_normalized, rep.mean_abs, rep.std_abs):
            w.writerow([repr(float(x)) for x in row])
    (sink / "consistency.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return {"consistency": "consistency.csv", "consistency_json": "consistency.json"}


@dataclass
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    taus: np.ndarray
    values: np.ndarray  # (T, R, R); values[t, i, j] at (xs[j], ys[i])
    grads: np.ndarray  # (T, R, R, 2)

    @property
    def resolution(self) -> int:
        return len(self.xs)


def landscape_grid(v: InterValueNet, taus, resolution: int, bounds=(-1.0, 1.0), state=None) -> LandscapeGrid:
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    xs = np.linspace(bounds[0], bounds[1], resolution)
    ys = xs.copy()
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n = len(pts)
    s = np.zeros((n, 0)) if state is None else np.repeat(np.atleast_2d(state), n, axis=0)
    vals, grads = [], []
    for tau in taus:
        vals.append(v(s, pts, tau).reshape(resolution, resolution))
        grads.append(v.grad_x(s, pts, tau).reshape(resolution, resolution, 2))
    return LandscapeGrid(xs, ys, np.asarray(taus, dtype=np.float64), np.array(vals), np.array(grads))


def write_landscape(grid: LandscapeGrid, sink) -> dict[str, str]:
    sink = Path(sink)
    sink.mkdir(parents=True, exist_ok=True)
    out = {}
    with open(sink / "landscape.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "x", "y", "value", "grad_x", "grad_y"])
        for t, tau in enumerate(grid.taus):
            for i, y in enumerate(grid.ys):
                for j, x in enumerate(grid.xs):
                    gxv, gyv = grid.grads[t, i, j]
                    w.writerow([repr(float(v)) for v in (tau, x, y, grid.values[t, i, j], gxv, gyv)])
    out["landscape"] = "landscape.csv"
    for t, tau in enumerate(grid.taus):
        name = f"landscape_tau{tau:.2f}.svg"
        (sink / name).write_text(heatmap_svg(grid.values[t], title=f"V at tau={tau:.2f}"))
        out[f"heatmap_{t}"] = name
        qname = f"gradient_tau{tau:.2f}.svg"
        (sink / qname).write_text(quiver_svg(grid.xs, grid.ys, grid.grads[t], title=f"grad V at tau={tau:.2f}"))
        out[f"quiver_{t}"] = qname
    return out


def coverage_counts(points: np.ndarray, dataset: OfflineDataset2D, eps: float = 0.3) -> np.ndarray:
    """Sample counts per mode (``eight_gaussians``) or per manifold segment.

    Curve datasets are split into 8 equal-progress segments per component and
    only samples within ``eps`` of the data support are counted.
    """
    if dataset.name == "eight_gaussians":
        return np.bincount(mode_assignment(points, dataset.norm), minlength=8)
    on = support_distance(dataset, points) <= eps
    comp, u = local_progress(dataset.name, dataset.norm.denormalize(points[on]))
    seg = np.minimum((u * SEGMENTS_PER_COMPONENT).astype(int), SEGMENTS_PER_COMPONENT - 1)
    n_bins = n_components(dataset.name) * SEGMENTS_PER_COMPONENT
    return np.bincount(comp * SEGMENTS_PER_COMPONENT + seg, minlength=n_bins)


def sample_metrics(sampler, dataset: OfflineDataset2D, spec: RewardSpec, n_samples: int, rng: np.random.Generator,
                   eps: float = 0.3) -> dict:
    """Mean scaled reward, on-manifold fraction and mode coverage of ``n_samples`` actions.

    ``sampler`` is ``sampler(n, rng) -> (n, 2)`` or has a ``sample`` method
    of that signature.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    draw = sampler.sample if hasattr(sampler, "sample") else sampler
    pts = np.asarray(draw(n_samples, rng), dtype=np.float64)
    if pts.size == 0:
        raise ValueError("no samples to evaluate")
    counts = coverage_counts(pts, dataset, eps)
    return {
        "mean_reward": float(np.mean(spec.scaled(pts))),
        "on_manifold_frac": float(np.mean(support_distance(dataset, pts) <= eps)),
        "mode_coverage": int(np.sum(counts >= COVERAGE_SHARE * len(pts))),
    }


def timing_benchmark(methods, flow_steps, steps: int, warmup: int = 10, dataset: OfflineDataset2D | None = None,
                     **cfg_overrides) -> list[dict]:
    """Median wall-clock ms per RL step for each (method, flow steps) cell.

    Every cell trains on the same fixed batch; the first ``warmup`` steps are
    discarded.
    """
    from .envs2d import gen_dataset
    from .trainers import Learner, TrainConfig, sample_batch

    if steps < 1:
        raise ValueError("need at least one timed step after warm-up")
    ds = gen_dataset("swiss_roll", 2048, seed=0) if dataset is None else dataset
    rows = []
    for method in methods:
        for k in flow_steps:
            cfg = TrainConfig(method=method, n_flow_steps=int(k), lam=1.0, alpha=1.0, **cfg_overrides)
            learner = Learner(cfg)
            batch = sample_batch(ds, learner.cfg.batch_size, np.random.default_rng(0))
            times = []
            for i in range(warmup + steps):
                t0 = time.perf_counter()
                learner.rl_step(batch)
                if i >= warmup:
                    times.append((time.perf_counter() - t0) * 1e3)
            rows.append({"method": method, "flow_steps": int(k), "ms_per_step": statistics.median(times),
                         "steps": steps})
    return rows
