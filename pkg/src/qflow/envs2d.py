"""Synthetic 2D offline datasets with manifold-aligned rewards.

Every dataset is a fixed-state bandit: the "action" is a 2D point and the
reward grows along the data manifold toward one designated end. Points are
generated in raw coordinates and then mapped into ``[-1, 1]^2`` with one
isotropic affine map, which preserves the geometry.

Reward shapes are a reconstruction. Curve datasets use the normalized
generating parameter of the nearest manifold point; ``eight_gaussians`` uses
a fixed table ``0.125 * k`` for mode ``k`` counted counter-clockwise from
angle 0.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DATASETS",
    "DEFAULT_NOISE",
    "Normalization",
    "RewardSpec",
    "OfflineDataset2D",
    "gen_dataset",
    "reward",
    "support_distance",
    "mode_assignment",
    "manifold_progress",
    "local_progress",
    "n_components",
    "save_dataset",
    "load_dataset",
    "file_fingerprint",
]

DATASETS = ("swiss_roll", "two_spirals", "eight_gaussians", "moons")

DEFAULT_NOISE = {"swiss_roll": 0.05, "moons": 0.05, "two_spirals": 0.02, "eight_gaussians": 0.05}

SWISS_T = (1.5 * np.pi, 4.5 * np.pi)
SWISS_SCALE = 4.5 * np.pi
SPIRAL_T = (0.5 * np.pi, 4.0 * np.pi)
SPIRAL_SCALE = 4.0 * np.pi
MOONS_CENTER = np.array([0.5, 0.25])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """``normalized = (raw - offset) / scale`` with one scale for both axes."""

    scale: float
    offset: tuple[float, float]

    def normalize(self, p):
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.offset)) / self.scale

    def denormalize(self, q):
        return np.asarray(q, dtype=np.float64) * self.scale + np.asarray(self.offset)

    @classmethod
    def fit(cls, raw: np.ndarray) -> "Normalization":
        lo = raw.min(axis=0)
        hi = raw.max(axis=0)
        center = (lo + hi) / 2
        half = float(np.max(hi - lo) / 2)
        return cls(half if half > 0 else 1.0, (float(center[0]), float(center[1])))


# --- manifold components -------------------------------------------------
# A component maps a parameter t in [t_lo, t_hi] to raw 2D points and owns a
# slice [u_lo, u_hi] of the unit reward range.


@dataclass(frozen=True)
class _Curve:
    fn: Callable[[np.ndarray], np.ndarray]
    t_lo: float
    t_hi: float
    u_lo: float = 0.0
    u_hi: float = 1.0

    def progress(self, t):
        return self.u_lo + (self.u_hi - self.u_lo) * (t - self.t_lo) / (self.t_hi - self.t_lo)


def _swiss(t):
    return np.stack([t * np.cos(t), t * np.sin(t)], axis=-1) / SWISS_SCALE


def _spiral(t):
    return np.stack([t * np.cos(t), t * np.sin(t)], axis=-1) / SPIRAL_SCALE


def _moon_upper(th):
    # traversed left to right as th goes 0 -> pi
    return np.stack([-np.cos(th), np.sin(th)], axis=-1) - MOONS_CENTER


def _moon_lower(th):
    return np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=-1) - MOONS_CENTER


def _curves(name: str) -> list[_Curve]:
    if name == "swiss_roll":
        return [_Curve(_swiss, *SWISS_T)]
    if name == "two_spirals":
        return [_Curve(_spiral, *SPIRAL_T), _Curve(lambda t: -_spiral(t), *SPIRAL_T)]
    if name == "moons":
        return [_Curve(_moon_upper, 0.0, np.pi, 0.0, 0.5), _Curve(_moon_lower, 0.0, np.pi, 0.5, 1.0)]
    raise ConfigError(f"{name!r} has no curve manifold")


def gaussian_means() -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


class _Polyline:
    """Dense polyline of one component with exact point-to-segment projection."""

    def __init__(self, curve: _Curve, n: int = 4096):
        self.curve = curve
        self.t = np.linspace(curve.t_lo, curve.t_hi, n)
        self.p = curve.fn(self.t)
        self.tree = cKDTree(self.p)

    def project(self, q: np.ndarray, k: int = 4):
        """Return (distance, parameter t) of the nearest curve point for each row."""
        k = min(k, len(self.t))
        _, idx = self.tree.query(q, k=k)
        idx = np.atleast_2d(idx).reshape(len(q), k)
        best_d = np.full(len(q), np.inf)
        best_t = np.zeros(len(q))
        last = len(self.t) - 1
        for j in range(k):
            for seg in (idx[:, j] - 1, idx[:, j]):
                seg = np.clip(seg, 0, last - 1)
                a = self.p[seg]
                b = self.p[seg + 1]
                ab = b - a
                w = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
                proj = a + w[:, None] * ab
                d = np.linalg.norm(q - proj, axis=1)
                better = d < best_d
                best_d = np.where(better, d, best_d)
                best_t = np.where(better, self.t[seg] + w * (self.t[seg + 1] - self.t[seg]), best_t)
        return best_d, best_t


_POLYLINES: dict[str, list[_Polyline]] = {}


def _polylines(name: str) -> list[_Polyline]:
    if name not in _POLYLINES:
        _POLYLINES[name] = [_Polyline(c) for c in _curves(name)]
    return _POLYLINES[name]


@dataclass(frozen=True)
class RewardSpec:
    """Reward over normalized points.

    ``kind`` is ``arc_progress`` for curve datasets and ``mode_table`` for
    ``eight_gaussians``. ``lo``/``hi`` are the raw reward range over the
    generating dataset and define the min-max scaled rewards it stores.
    """

    kind: str
    dataset: str
    norm: Normalization
    lo: float = 0.0
    hi: float = 1.0
    table: tuple[float, ...] = tuple(0.125 * k for k in range(8))

    def scaled(self, points) -> np.ndarray:
        return np.clip((reward(self, points) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "dataset": self.dataset, "lo": self.lo, "hi": self.hi, "table": list(self.table),
            "norm": {"scale": self.norm.scale, "offset": list(self.norm.offset)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardSpec":
        norm = Normalization(d["norm"]["scale"], tuple(d["norm"]["offset"]))
        return cls(d["kind"], d["dataset"], norm, d["lo"], d["hi"], tuple(d["table"]))


def _component_and_t(name: str, raw: np.ndarray):
    """Nearest manifold component, parameter and distance for raw points."""
    best = None
    for ci, pl in enumerate(_polylines(name)):
        d, t = pl.project(raw)
        if best is None:
            best = [d, t, np.zeros(len(raw), dtype=np.int64)]
        else:
            better = d < best[0]
            best[0] = np.where(better, d, best[0])
            best[1] = np.where(better, t, best[1])
            best[2] = np.where(better, ci, best[2])
    return best[2], best[1], best[0]


def manifold_progress(name: str, raw: np.ndarray):
    """``(component, progress in [0, 1])`` of the nearest manifold point."""
    comp, t, _ = _component_and_t(name, raw)
    curves = _curves(name)
    u = np.empty(len(raw))
    for ci, c in enumerate(curves):
        m = comp == ci
        u[m] = c.progress(t[m])
    return comp, u


def local_progress(name: str, raw: np.ndarray):
    """``(component, progress within that component in [0, 1])``."""
    comp, t, _ = _component_and_t(name, raw)
    curves = _curves(name)
    lo = np.array([c.t_lo for c in curves])[comp]
    hi = np.array([c.t_hi for c in curves])[comp]
    return comp, (t - lo) / (hi - lo)


def n_components(name: str) -> int:
    return 8 if name == "eight_gaussians" else len(_curves(name))


def mode_assignment(points, norm: Normalization) -> np.ndarray:
    """Index of the nearest ``eight_gaussians`` mode for normalized points."""
    raw = norm.denormalize(np.atleast_2d(points))
    d = np.linalg.norm(raw[:, None, :] - gaussian_means()[None], axis=2)
    return np.argmin(d, axis=1)


def reward(spec: RewardSpec, point) -> np.ndarray:
    """Raw reward in [0, 1] at normalized point(s); scalar in, scalar out."""
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if spec.kind == "mode_table":
        out = np.asarray(spec.table)[mode_assignment(pts, spec.norm)]
    elif spec.kind == "arc_progress":
        _, out = manifold_progress(spec.dataset, spec.norm.denormalize(pts))
    else:
        raise ConfigError(f"unknown reward kind {spec.kind!r}")
    return out[0] if single else out


@dataclass
class OfflineDataset2D:
    actions: np.ndarray  # (N, 2), normalized
    rewards: np.ndarray  # (N,), min-max scaled to [0, 1]
    name: str
    norm: Normalization
    seed: int
    noise: float
    reward_spec: RewardSpec
    labels: np.ndarray = field(default=None, repr=False)  # component or mode index per point
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.actions)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.actions)
        return self._tree

    def metadata(self) -> dict:
        return {
            "name": self.name, "n": len(self), "noise": self.noise, "seed": self.seed,
            "norm": {"scale": self.norm.scale, "offset": list(self.norm.offset)},
            "reward_spec": self.reward_spec.to_dict(),
            "reward_note": "reconstructed reward shape; high-value end placement chosen by this generator",
        }


def gen_dataset(name: str, n: int = 10000, noise: float | None = None, seed: int = 0) -> OfflineDataset2D:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    noise = DEFAULT_NOISE[name] if noise is None else float(noise)
    rng = np.random.default_rng(seed)
    if name == "swiss_roll":
        t = rng.uniform(*SWISS_T, size=n)
        raw = _swiss(t)
        labels = np.zeros(n, dtype=np.int64)
    elif name == "two_spirals":
        lo, hi = SPIRAL_T
        # uniform in t^2 spreads points roughly evenly along the arc
        t = np.sqrt(rng.uniform(lo * lo, hi * hi, size=n))
        labels = rng.integers(0, 2, size=n)
        raw = _spiral(t) * np.where(labels == 0, 1.0, -1.0)[:, None]
    elif name == "moons":
        th = rng.uniform(0.0, np.pi, size=n)
        labels = rng.integers(0, 2, size=n)
        raw = np.where(labels[:, None] == 0, _moon_upper(th), _moon_lower(th))
    else:
        labels = rng.integers(0, 8, size=n)
        raw = gaussian_means()[labels]
    raw = raw + noise * rng.standard_normal(raw.shape)
    norm = Normalization.fit(raw)
    actions = norm.normalize(raw)
    kind = "mode_table" if name == "eight_gaussians" else "arc_progress"
    spec = RewardSpec(kind, name, norm)
    r = reward(spec, actions)
    lo, hi = float(r.min()), float(r.max())
    if hi <= lo:
        hi = lo + 1.0
    spec = RewardSpec(kind, name, norm, lo, hi)
    return OfflineDataset2D(actions, (r - lo) / (hi - lo), name, norm, seed, noise, spec, labels)


def support_distance(ds: OfflineDataset2D, point) -> np.ndarray:
    """Euclidean distance to the nearest dataset action (exact, KD-tree)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    p = np.asarray(point, dtype=np.float64)
    d, _ = ds.tree.query(np.atleast_2d(p))
    return d[0] if p.ndim == 1 else d


def save_dataset(ds: OfflineDataset2D, path) -> tuple[Path, Path]:
    """Write ``x,y,reward`` CSV plus a JSON sidecar with generator metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "reward"])
        for (x, y), r in zip(ds.actions, ds.rewards):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(r))])
    side = path.with_suffix(".json")
    side.write_text(json.dumps(ds.metadata(), indent=2, sort_keys=True) + "\n")
    return path, side


def load_dataset(path) -> OfflineDataset2D:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    spec = RewardSpec.from_dict(meta["reward_spec"])
    ds = OfflineDataset2D(rows[:, :2].copy(), rows[:, 2].copy(), meta["name"], spec.norm, meta["seed"],
                          meta["noise"], spec)
    if ds.name == "eight_gaussians":
        ds.labels = mode_assignment(ds.actions, ds.norm)
    else:
        ds.labels, _ = manifold_progress(ds.name, ds.norm.denormalize(ds.actions))
    return ds


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
