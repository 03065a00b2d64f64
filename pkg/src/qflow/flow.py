"""State-conditioned flow policy, forward-Euler flow map and the CFM loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation, Node, Tape
from .nets import Mlp, MlpSpec, fourier_embed, init_mlp

__all__ = [
    "Batch",
    "PathDraw",
    "FlowPolicy",
    "IntegrationError",
    "interp_path",
    "draw_path",
    "euler_schedule",
    "integrate",
    "flow_map",
    "sample_action",
    "matching_loss",
    "cfm_loss",
]


class IntegrationError(FloatingPointError):
    """The Euler integrator produced a non-finite state."""


@dataclass
class Batch:
    """Offline transitions. ``s`` and ``s_next`` may have zero columns."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.a.shape[0]

    @classmethod
    def bandit(cls, actions: np.ndarray, rewards: np.ndarray | None = None) -> "Batch":
        """Single-step batch with empty states, as used by the 2D tasks."""
        a = np.asarray(actions, dtype=np.float64)
        n = a.shape[0]
        r = np.zeros(n) if rewards is None else np.asarray(rewards, dtype=np.float64)
        empty = np.zeros((n, 0))
        return cls(empty, a, r, empty.copy(), np.ones(n))


@dataclass
class PathDraw:
    x0: np.ndarray
    tau: np.ndarray  # (n,)
    x_tau: np.ndarray
    u: np.ndarray  # conditional velocity x1 - x0


class FlowPolicy:
    """Vector field ``v(x, tau, s)`` on an MLP over ``[x, fourier(tau), s]``."""

    def __init__(self, net: Mlp, action_dim: int, state_dim: int = 0, n_steps: int = 25, embed_dim: int = 16):
        if n_steps < 1:
            raise ContractViolation(f"n_steps must be >= 1, got {n_steps}")
        if net.spec.input_dim != action_dim + embed_dim + state_dim:
            raise ContractViolation(
                f"vector-field input dim {net.spec.input_dim} != {action_dim}+{embed_dim}+{state_dim}"
            )
        if net.spec.output_dim != action_dim:
            raise ContractViolation(f"vector-field output dim {net.spec.output_dim} != action dim {action_dim}")
        self.net = net
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.n_steps = n_steps
        self.embed_dim = embed_dim

    @classmethod
    def create(cls, action_dim: int, state_dim: int = 0, hidden=(512, 512, 512, 512, 256), activation="relu",
               n_steps: int = 25, embed_dim: int = 16, seed=0) -> "FlowPolicy":
        spec = MlpSpec(action_dim + embed_dim + state_dim, tuple(hidden), action_dim, activation)
        return cls(init_mlp(spec, seed), action_dim, state_dim, n_steps, embed_dim)

    def copy(self) -> "FlowPolicy":
        return FlowPolicy(self.net.copy(), self.action_dim, self.state_dim, self.n_steps, self.embed_dim)

    def _inputs(self, x, tau, s):
        n = x.shape[0]
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))
        s = np.zeros((n, 0)) if s is None else s
        return fourier_embed(tau, self.embed_dim), s

    def velocity(self, x: np.ndarray, tau, s: np.ndarray | None = None) -> np.ndarray:
        emb, s = self._inputs(x, tau, s)
        return self.net.predict(np.concatenate([x, emb, s], axis=1))

    def velocity_node(self, tape: Tape, x, tau, s=None, params: Sequence[Node] | None = None) -> Node:
        xv = x.value if isinstance(x, Node) else x
        emb, s = self._inputs(xv, tau, s)
        inp = tape.concat([x, emb, s], axis=1)
        return self.net(tape, inp, params)


def interp_path(x0, x1, tau):
    """Straight conditional path; returns ``(x_tau, u)`` with ``u = x1 - x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractViolation("flow time must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * x1 + (1.0 - t) * x0, x1 - x0


def draw_path(rng: np.random.Generator, x1: np.ndarray) -> PathDraw:
    """Draw ``x0 ~ N(0, I)`` then ``tau ~ U(0, 1)`` and build the path point."""
    x0 = rng.standard_normal(x1.shape)
    tau = rng.random(x1.shape[0])
    x_tau, u = interp_path(x0, x1, tau)
    return PathDraw(x0, tau, x_tau, u)


def euler_schedule(t_start, t_end, n_steps: int, n: int):
    """Per-row step counts and sizes for Euler from ``t_start`` to ``t_end``.

    ``K = max(1, round((t_end - t_start) * n_steps))`` uniform steps of size
    ``(t_end - t_start) / K``; rounding is half-up.
    """
    t0 = np.broadcast_to(np.asarray(t_start, dtype=np.float64), (n,)).copy()
    t1 = np.broadcast_to(np.asarray(t_end, dtype=np.float64), (n,)).copy()
    if np.any(t0 < 0) or np.any(t1 > 1) or np.any(t1 < t0):
        raise ContractViolation("integration needs 0 <= t_start <= t_end <= 1")
    span = t1 - t0
    k = np.maximum(1, np.floor(span * n_steps + 0.5)).astype(np.int64)
    return t0, k, span / k


def integrate(policy: FlowPolicy, x, t_start, t_end=1.0, s=None, tape: Tape | None = None,
              params: Sequence[Node] | None = None):
    """Forward Euler on the policy's vector field.

    Without ``tape`` the rollout is a detached numpy computation. With a tape,
    every step is recorded so gradients reach ``params`` and ``x`` (BPTT);
    rows that finish early are frozen by a zero step mask.
    """
    on_tape = tape is not None
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    n = xv.shape[0]
    t0, k, dt = euler_schedule(t_start, t_end, policy.n_steps, n)
    s = np.zeros((n, 0)) if s is None else s
    t_end = np.broadcast_to(np.asarray(t_end, dtype=np.float64), (n,))
    if not on_tape:
        xv = xv.copy()
        uniform = bool(np.all(k == k[0]))
        for step in range(int(k.max())):
            if uniform:
                xv = xv + dt[:, None] * policy.velocity(xv, t0 + step * dt, s)
            else:
                act = k > step
                rows = np.flatnonzero(act)
                v = policy.velocity(xv[rows], t0[rows] + step * dt[rows], s[rows])
                xv[rows] = xv[rows] + dt[rows, None] * v
            if not np.all(np.isfinite(xv)):
                raise IntegrationError(f"non-finite state after Euler step {step}")
        return xv
    h = x
    for step in range(int(k.max())):
        act = k > step
        t = np.where(act, t0 + step * dt, t_end)
        v = policy.velocity_node(tape, h, t, s, params)
        h = tape.add(h, tape.mul(v, (dt * act)[:, None]))
        if not np.all(np.isfinite(h.value)):
            raise IntegrationError(f"non-finite state after Euler step {step}")
    return h


def flow_map(policy: FlowPolicy, x, tau_start, s=None, on_tape: bool = False, tape: Tape | None = None,
             params: Sequence[Node] | None = None):
    """Integrate from ``tau_start`` to 1 (the flow map ``Psi_{1, tau}``)."""
    if on_tape and tape is None:
        raise ContractViolation("on_tape=True requires a tape")
    return integrate(policy, x, tau_start, 1.0, s, tape if on_tape else None, params)


def sample_action(policy: FlowPolicy, s: np.ndarray | None, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """One action per row of ``s`` (or ``n`` actions when ``s`` is None)."""
    if s is None:
        if n is None:
            raise ContractViolation("give either states or a sample count")
        s = np.zeros((n, 0))
    x0 = rng.standard_normal((s.shape[0], policy.action_dim))
    return flow_map(policy, x0, 0.0, s)


def matching_loss(policy: FlowPolicy, tape: Tape, params, x_tau, tau, s, target, weights=None) -> Node:
    """Batch mean of ``w_i * ||v(x_tau, tau, s) - target||^2``."""
    v = policy.velocity_node(tape, x_tau, tau, s, params)
    per = tape.sum(tape.square(tape.sub(v, target)), axis=1)
    if weights is not None:
        per = tape.mul(per, weights)
    return tape.mean(per)


def cfm_loss(policy: FlowPolicy, batch: Batch, rng: np.random.Generator, tape: Tape | None = None,
             params=None, draw: PathDraw | None = None) -> Node:
    """Conditional flow matching loss on dataset actions ``x1 = batch.a``."""
    if len(batch) == 0:
        raise ContractViolation("cfm_loss needs a non-empty batch")
    tape = Tape() if tape is None else tape
    if params is None:
        params = policy.net.bind(tape)
    d = draw_path(rng, batch.a) if draw is None else draw
    return matching_loss(policy, tape, params, d.x_tau, d.tau, batch.s, d.u)
