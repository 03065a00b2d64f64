"""Outer critic ensemble and the flow-consistent intermediate value network."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ContractViolation, Node, Tape
from .flow import Batch, FlowPolicy, PathDraw, draw_path, flow_map
from .nets import AdamState, Mlp, MlpSpec, fourier_embed, init_mlp, polyak_update

__all__ = [
    "CriticEnsemble",
    "InterValueNet",
    "aggregate",
    "q_value",
    "critic_loss",
    "inter_value_target",
    "inter_value_loss",
]


def aggregate(values: Sequence, how: str, tape: Tape | None = None):
    """Mean or min over ensemble outputs (arrays, or nodes when ``tape`` is set)."""
    if how not in ("mean", "min"):
        raise ContractViolation(f"unknown aggregation {how!r}")
    if tape is None:
        stack = np.stack(values)
        return stack.mean(axis=0) if how == "mean" else stack.min(axis=0)
    if how == "min":
        # Route the gradient to the member attaining the minimum.
        stack = np.stack([v.value for v in values])
        idx = np.argmin(stack, axis=0)
        out = None
        for j, v in enumerate(values):
            part = tape.mul(v, (idx == j).astype(np.float64))
            out = part if out is None else tape.add(out, part)
        return out
    out = values[0]
    for v in values[1:]:
        out = tape.add(out, v)
    return tape.scale(out, 1.0 / len(values))


class CriticEnsemble:
    """``Q(s, a)`` members with Polyak-averaged target copies."""

    def __init__(self, members: list[Mlp], targets: list[Mlp] | None = None, aggregation: str = "mean",
                 gamma: float = 0.0, lr: float = 3e-4):
        if not members:
            raise ContractViolation("critic ensemble needs at least one member")
        targets = [m.copy() for m in members] if targets is None else targets
        if len(targets) != len(members) or any(t.spec != m.spec for t, m in zip(targets, members)):
            raise ContractViolation("critic members and targets must match in count and spec")
        if not 0.0 <= gamma < 1.0:
            raise ContractViolation(f"discount must be in [0, 1), got {gamma}")
        aggregate([np.zeros(1)], aggregation)
        self.members = members
        self.targets = targets
        self.aggregation = aggregation
        self.gamma = gamma
        self.opts = [AdamState.for_params(m.params, lr=lr) for m in members]

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden=(512, 512, 512, 512), activation="relu",
               size: int = 2, aggregation="mean", gamma=0.0, lr=3e-4, rng=0) -> "CriticEnsemble":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        spec = MlpSpec(state_dim + action_dim, tuple(hidden), 1, activation)
        return cls([init_mlp(spec, rng) for _ in range(size)], aggregation=aggregation, gamma=gamma, lr=lr)

    def __len__(self):
        return len(self.members)

    def member_values(self, s, a, use_target: bool = False) -> list[np.ndarray]:
        nets = self.targets if use_target else self.members
        inp = np.concatenate([s, a], axis=1)
        return [m.predict(inp)[:, 0] for m in nets]

    def update_targets(self, eta: float) -> None:
        for t, m in zip(self.targets, self.members):
            polyak_update(t, m, eta)

    def node(self, tape: Tape, s, a, params_list=None, use_target=False) -> Node:
        """Aggregated value as a tape node; parameters are constants unless given."""
        nets = self.targets if use_target else self.members
        inp = tape.concat([s, a], axis=1)
        outs = []
        for j, m in enumerate(nets):
            params = None if params_list is None else params_list[j]
            outs.append(m(tape, inp, params))
        return aggregate(outs, self.aggregation, tape)


def q_value(c: CriticEnsemble, s, a, use_target: bool = False) -> np.ndarray:
    return aggregate(c.member_values(s, a, use_target), c.aggregation)


def _bellman_target(c: CriticEnsemble, batch: Batch, a_next: np.ndarray | None) -> np.ndarray:
    if c.gamma == 0.0:
        return batch.r.copy()
    if a_next is None:
        raise ContractViolation("a bootstrapped critic needs next actions from the policy")
    q_next = q_value(c, batch.s_next, a_next, use_target=True)
    return batch.r + c.gamma * (1.0 - batch.done) * q_next


def critic_loss(c: CriticEnsemble, batch: Batch, a_next: np.ndarray | None, tape: Tape | None = None,
                params_list=None) -> Node:
    """Member-averaged mean squared Bellman error against one shared target."""
    tape = Tape() if tape is None else tape
    if params_list is None:
        params_list = [m.bind(tape) for m in c.members]
    y = _bellman_target(c, batch, a_next)[:, None]
    inp = tape.concat([batch.s, batch.a], axis=1)
    total = None
    for m, p in zip(c.members, params_list):
        err = tape.mean(tape.square(tape.sub(m(tape, inp, p), y)))
        total = err if total is None else tape.add(total, err)
    return tape.scale(total, 1.0 / len(c.members))


class InterValueNet:
    """Intermediate value ``V(s, x, tau)`` on ``[s, x, fourier(tau)]``.

    The inner flow process has zero running reward and unit discount, so the
    only regression target is the terminal critic value; there is no reward
    accumulation along the flow.
    """

    def __init__(self, members: list[Mlp], aggregation: str = "mean", embed_dim: int = 16, lr: float = 3e-4):
        if not members:
            raise ContractViolation("value ensemble needs at least one member")
        if any(m.spec.output_dim != 1 for m in members):
            raise ContractViolation("intermediate value output must be scalar")
        self.members = members
        self.aggregation = aggregation
        self.embed_dim = embed_dim
        self.opts = [AdamState.for_params(m.params, lr=lr) for m in members]

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden=(512, 512, 512, 512), activation="relu", size=2,
               aggregation="mean", embed_dim=16, lr=3e-4, rng=0) -> "InterValueNet":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        spec = MlpSpec(state_dim + action_dim + embed_dim, tuple(hidden), 1, activation)
        return cls([init_mlp(spec, rng) for _ in range(size)], aggregation, embed_dim, lr)

    def _emb(self, n, tau):
        return fourier_embed(np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,)), self.embed_dim)

    def __call__(self, s, x, tau) -> np.ndarray:
        s = np.zeros((x.shape[0], 0)) if s is None else s
        inp = np.concatenate([s, x, self._emb(x.shape[0], tau)], axis=1)
        return aggregate([m.predict(inp)[:, 0] for m in self.members], self.aggregation)

    def member_nodes(self, tape: Tape, s, x, tau, params_list=None) -> list[Node]:
        xv = x.value if isinstance(x, Node) else x
        s = np.zeros((xv.shape[0], 0)) if s is None else s
        inp = tape.concat([s, x, self._emb(xv.shape[0], tau)], axis=1)
        return [m(tape, inp, None if params_list is None else params_list[j]) for j, m in enumerate(self.members)]

    def node(self, tape: Tape, s, x, tau, params_list=None) -> Node:
        return aggregate(self.member_nodes(tape, s, x, tau, params_list), self.aggregation, tape)

    def grad_x(self, s, x, tau) -> np.ndarray:
        """Per-row ``d V / d x`` with the network held fixed."""
        tape = Tape()
        xn = tape.variable(x)
        return tape.grad_wrt_input(tape.sum(self.node(tape, s, xn, tau)), xn)

    def copy(self) -> "InterValueNet":
        out = InterValueNet([m.copy() for m in self.members], self.aggregation, self.embed_dim)
        out.opts = [AdamState([a.copy() for a in o.m], [b.copy() for b in o.v], o.step, o.lr, o.beta1, o.beta2, o.eps)
                    for o in self.opts]
        return out


def inter_value_target(c: CriticEnsemble, policy: FlowPolicy, s, x_tau, tau) -> np.ndarray:
    """Target critic at the terminal point of the policy rollout from ``(x_tau, tau)``."""
    x1_hat = flow_map(policy, x_tau, tau, s)
    return q_value(c, s, x1_hat, use_target=True)


def inter_value_loss(v: InterValueNet, c: CriticEnsemble, policy: FlowPolicy, batch: Batch,
                     rng: np.random.Generator | None = None, tape: Tape | None = None, params_list=None,
                     draw: PathDraw | None = None) -> Node:
    """Member average of ``mean (V(s, x_tau, tau) - Q_target(s, x1_hat))^2``.

    The target is a plain array, so no gradient can reach it.
    """
    d = draw_path(rng, batch.a) if draw is None else draw
    tape = Tape() if tape is None else tape
    if params_list is None:
        params_list = [m.bind(tape) for m in v.members]
    y = inter_value_target(c, policy, batch.s, d.x_tau, d.tau)[:, None]
    total = None
    for out in v.member_nodes(tape, batch.s, d.x_tau, d.tau, params_list):
        err = tape.mean(tape.square(tape.sub(out, y)))
        total = err if total is None else tape.add(total, err)
    return tape.scale(total, 1.0 / len(v.members))
