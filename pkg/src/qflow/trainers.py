"""Training loops: Q-Flow and the comparison optimizers.

All methods share one critic update (:meth:`Learner.critic_update`). A run is
a behavior-cloning phase (critic + CFM, plus the method's auxiliary
regressions) followed by an RL phase driven by the method's step function.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, Tape
from .envs2d import OfflineDataset2D, file_fingerprint, save_dataset
from .flow import Batch, FlowPolicy, PathDraw, draw_path, flow_map, integrate, matching_loss, sample_action
from .nets import AdamState, Mlp, MlpSpec, adam_step, init_mlp, load_checkpoint, save_checkpoint
from .seeding import Streams
from .values import CriticEnsemble, InterValueNet, critic_loss, inter_value_loss, q_value

__all__ = [
    "METHODS",
    "PROFILES",
    "TrainConfig",
    "StepMetrics",
    "TrainingDivergence",
    "Learner",
    "guided_target",
    "qflow_step",
    "qflow_target",
    "outer_guidance_target",
    "fbrac_loss",
    "ivm_bptt_loss",
    "fbrac_step",
    "fql_step",
    "fawac_step",
    "rejection_step",
    "rejection_policy",
    "ivm_bptt_step",
    "outer_guidance_step",
    "STEP_FUNCTIONS",
    "run_experiment",
    "METRIC_COLUMNS",
]

METHODS = ("qflow", "fbrac", "fql", "fawac", "rejection", "ivm_bptt", "outer_guidance")
GUIDED = ("qflow", "outer_guidance")
BC_PENALIZED = ("fbrac", "fql", "ivm_bptt")
USES_VALUE = ("qflow", "ivm_bptt")

PROFILES = {
    "2d": {"policy_hidden": (512, 512, 512, 512, 256), "value_hidden": (512, 512, 512, 512),
           "activation": "relu", "n_flow_steps": 25},
    "standard": {"policy_hidden": (512, 512, 512, 512), "value_hidden": (512, 512, 512, 512),
                 "activation": "gelu", "n_flow_steps": 10},
}

METRIC_COLUMNS = ("step", "loss_critic", "loss_inter_value", "loss_policy", "grad_norm_policy", "ms_per_step")


class TrainingDivergence(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    method: str = "qflow"
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 256
    bc_epochs: int = 2000
    rl_epochs: int = 100
    bc_steps: int | None = None
    steps: int | None = None
    eta: float = 0.005
    seed: int = 0
    profile: str = "2d"
    policy_hidden: tuple | None = None
    value_hidden: tuple | None = None
    activation: str | None = None
    n_flow_steps: int | None = None
    embed_dim: int = 16
    ensemble_size: int = 2
    aggregation: str = "mean"
    gamma: float = 0.0
    lr: float = 3e-4
    n_candidates: int = 32
    grad_clip: float | None = None
    dataset: str = "swiss_roll"
    n_data: int = 10000
    noise: float | None = None
    data_seed: int = 0
    eval_samples: int = 4096
    eps: float = 0.3
    record_wall_clock: bool = False

    def resolved(self) -> "TrainConfig":
        """Fill profile defaults and validate."""
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {', '.join(PROFILES)}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        prof = PROFILES[self.profile]
        cfg = dataclasses.replace(self)
        for key, default in prof.items():
            if getattr(cfg, key) is None:
                setattr(cfg, key, default)
        cfg.policy_hidden = tuple(int(h) for h in cfg.policy_hidden)
        cfg.value_hidden = tuple(int(h) for h in cfg.value_hidden)
        if cfg.method in GUIDED and not cfg.lam > 0:
            raise ValueError(f"guidance coefficient lam must be > 0, got {cfg.lam}")
        if cfg.method in BC_PENALIZED and not cfg.alpha >= 0:
            raise ValueError(f"BC coefficient alpha must be >= 0, got {cfg.alpha}")
        if cfg.batch_size < 1 or cfg.n_candidates < 1:
            raise ValueError("batch_size and n_candidates must be >= 1")
        if not 0 <= cfg.eta <= 1:
            raise ValueError(f"eta must be in [0, 1], got {cfg.eta}")
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("policy_hidden", "value_hidden"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved().to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - valid)
        if unknown:
            raise KeyError(f"unknown config keys {unknown}; valid keys: {', '.join(sorted(valid))}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: _coerce(k, v, types[k]) for k, v in d.items()})


def _coerce(key: str, value, kind: str):
    # YAML leaves "1e-3" as a string; numeric fields accept any number-like value
    if value is None or not kind.startswith(("float", "int", "bool")):
        return value
    try:
        if kind.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        num = float(value)
        if kind.startswith("int"):
            if num != int(num):
                raise TypeError
            return int(num)
        return num
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r} expects {kind}, got {value!r}") from None


@dataclass
class StepMetrics:
    step: int
    loss_critic: float
    loss_inter_value: float
    loss_policy: float
    grad_norm_policy: float
    ms: float = 0.0

    def row(self, wall_clock: bool = True) -> list:
        return [self.step, repr(self.loss_critic), repr(self.loss_inter_value), repr(self.loss_policy),
                repr(self.grad_norm_policy), repr(self.ms if wall_clock else 0.0)]


def guided_target(u: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
    """``u + grad / lam``; ``lam = inf`` switches guidance off."""
    if math.isinf(lam):
        return u.copy()
    return u + (1.0 / lam) * grad


def _check(name: str, value: float, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingDivergence(f"step {step}: non-finite {name} loss ({value})")
    return value


class Learner:
    """All networks and optimizers of one run.

    ``trace`` (a list, off by default) records the order of sub-updates.
    """

    def __init__(self, cfg: TrainConfig, state_dim: int = 0, action_dim: int = 2):
        cfg = cfg.resolved()
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.streams = Streams(cfg.seed)
        self.step_count = 0
        self.trace: list | None = None
        init = self.streams["init"]
        self.policy = FlowPolicy.create(action_dim, state_dim, cfg.policy_hidden, cfg.activation,
                                        cfg.n_flow_steps, cfg.embed_dim, seed=init)
        self.policy_opt = AdamState.for_params(self.policy.net.params, lr=cfg.lr)
        self.critic = CriticEnsemble.create(state_dim, action_dim, cfg.value_hidden, cfg.activation,
                                            cfg.ensemble_size, cfg.aggregation, cfg.gamma, cfg.lr, rng=init)
        self.value = None
        if cfg.method in USES_VALUE:
            self.value = InterValueNet.create(state_dim, action_dim, cfg.value_hidden, cfg.activation,
                                              cfg.ensemble_size, cfg.aggregation, cfg.embed_dim, cfg.lr,
                                              rng=self.streams["init/value"])
        self.onestep = None
        if cfg.method == "fql":
            spec = MlpSpec(action_dim + state_dim, cfg.policy_hidden, action_dim, cfg.activation)
            self.onestep = init_mlp(spec, self.streams["init/onestep"])
            self.onestep_opt = AdamState.for_params(self.onestep.params, lr=cfg.lr)

    def rng(self, name: str) -> np.random.Generator:
        return self.streams[name]

    def _log(self, event: str) -> None:
        if self.trace is not None:
            self.trace.append(event)

    # --- acting -----------------------------------------------------------
    def onestep_action(self, x0: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.onestep.predict(np.concatenate([x0, s], axis=1))

    def act(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Actions of the method's deployed policy at states ``s``."""
        if self.cfg.method == "fql":
            return self.onestep_action(rng.standard_normal((s.shape[0], self.action_dim)), s)
        if self.cfg.method == "rejection":
            return rejection_policy(self, s, self.cfg.n_candidates, rng)
        return sample_action(self.policy, s, rng)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.act(np.zeros((n, self.state_dim)), rng)

    # --- shared updates ---------------------------------------------------
    def critic_update(self, batch: Batch) -> float:
        self._log("critic")
        a_next = None
        if self.critic.gamma > 0:
            a_next = self.act(batch.s_next, self.rng("critic"))
        tape = Tape()
        plist = [m.bind(tape) for m in self.critic.members]
        loss = critic_loss(self.critic, batch, a_next, tape, plist)
        grads = tape.backward(loss)
        for m, p, opt in zip(self.critic.members, plist, self.critic.opts):
            adam_step(m.params, grads.get(p), opt, "critic")
        return float(loss.value)

    def value_update(self, batch: Batch, draw: PathDraw) -> float:
        self._log("value")
        tape = Tape()
        plist = [m.bind(tape) for m in self.value.members]
        loss = inter_value_loss(self.value, self.critic, self.policy, batch, tape=tape, params_list=plist, draw=draw)
        grads = tape.backward(loss)
        for m, p, opt in zip(self.value.members, plist, self.value.opts):
            adam_step(m.params, grads.get(p), opt, "inter-value")
        return float(loss.value)

    def apply_policy_loss(self, tape: Tape, params, loss, nets_params=None, opts=None, name="policy") -> float:
        """Backprop ``loss`` and take an Adam step; returns the global grad norm."""
        self._log("policy")
        groups = [(self.policy.net, params, self.policy_opt)] if nets_params is None else nets_params
        grads_all = tape.backward(loss)
        grads = [grads_all.get(p) for _, p, _ in groups]
        norm = math.sqrt(sum(float(np.sum(g * g)) for gs in grads for g in gs))
        if self.cfg.grad_clip is not None and norm > self.cfg.grad_clip:
            grads = [[g * (self.cfg.grad_clip / norm) for g in gs] for gs in grads]
        for (net, _, opt), gs in zip(groups, grads):
            adam_step(net.params, gs, opt, name)
        return norm

    def cfm_update(self, batch: Batch, draw: PathDraw, target=None, weights=None) -> tuple[float, float]:
        tape = Tape()
        params = self.policy.net.bind(tape)
        target = draw.u if target is None else target
        loss = matching_loss(self.policy, tape, params, draw.x_tau, draw.tau, batch.s, target, weights)
        gn = self.apply_policy_loss(tape, params, loss)
        return float(loss.value), gn

    def onestep_update(self, batch: Batch, rng: np.random.Generator, q_weight: float) -> tuple[float, float]:
        """Distill the flow map into the one-step net, optionally maximizing Q."""
        x0 = rng.standard_normal(batch.a.shape)
        target = flow_map(self.policy, x0, 0.0, batch.s)
        tape = Tape()
        params = self.onestep.bind(tape)
        mu = self.onestep(tape, tape.concat([x0, batch.s], axis=1), params)
        distill = tape.mean(tape.sum(tape.square(tape.sub(mu, target)), axis=1))
        alpha = self.cfg.alpha
        if q_weight == 0.0 or math.isinf(alpha):
            loss = distill
        else:
            q = tape.mean(self.critic.node(tape, batch.s, mu))
            loss = tape.sub(tape.scale(distill, alpha), tape.scale(q, q_weight))
        gn = self.apply_policy_loss(tape, params, loss, [(self.onestep, params, self.onestep_opt)], name="one-step")
        return float(loss.value), gn

    # --- steps ------------------------------------------------------------
    def _run_step(self, fn: Callable, batch: Batch) -> StepMetrics:
        t0 = time.perf_counter()
        try:
            m = fn(self, batch)
        except NonFiniteError as e:
            raise TrainingDivergence(f"step {self.step_count}: {e}") from e
        m.step = self.step_count
        m.ms = (time.perf_counter() - t0) * 1e3
        for name in ("critic", "inter_value", "policy"):
            _check(name, getattr(m, f"loss_{name}"), self.step_count)
        _check("policy gradient norm", m.grad_norm_policy, self.step_count)
        self.step_count += 1
        return m

    def bc_step(self, batch: Batch) -> StepMetrics:
        return self._run_step(_bc_step, batch)

    def rl_step(self, batch: Batch) -> StepMetrics:
        return self._run_step(lambda st, b: STEP_FUNCTIONS[st.cfg.method](st, b), batch)

    # --- persistence ------------------------------------------------------
    def nets(self) -> dict[str, Mlp]:
        out = {"policy": self.policy.net}
        for i, (m, t) in enumerate(zip(self.critic.members, self.critic.targets)):
            out[f"critic/{i}"] = m
            out[f"critic_target/{i}"] = t
        if self.value is not None:
            for i, m in enumerate(self.value.members):
                out[f"value/{i}"] = m
        if self.onestep is not None:
            out["onestep"] = self.onestep
        return out

    def optimizers(self) -> dict[str, AdamState]:
        out = {"policy": self.policy_opt}
        out.update({f"critic/{i}": o for i, o in enumerate(self.critic.opts)})
        if self.value is not None:
            out.update({f"value/{i}": o for i, o in enumerate(self.value.opts)})
        if self.onestep is not None:
            out["onestep"] = self.onestep_opt
        return out

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {"config": self.cfg.to_dict(), "state_dim": self.state_dim, "action_dim": self.action_dim,
                "step": self.step_count, **(extra or {})}
        return save_checkpoint(path, self.nets(), self.optimizers(), meta)

    @classmethod
    def load(cls, path) -> "Learner":
        nets, opts, meta = load_checkpoint(path)
        learner = cls(TrainConfig(**meta["config"]), meta["state_dim"], meta["action_dim"])
        learner.load_state(nets, opts)
        learner.step_count = meta["step"]
        return learner

    def load_state(self, nets: dict[str, Mlp], opts: dict[str, AdamState]) -> None:
        for name, net in self.nets().items():
            for dst, src in zip(net.params, nets[name].params):
                np.copyto(dst, src)
        for name, opt in self.optimizers().items():
            src = opts[name]
            for a, b in zip(opt.m + opt.v, src.m + src.v):
                np.copyto(a, b)
            opt.step = src.step

    def clone(self, **overrides) -> "Learner":
        """Deep copy, optionally under a different config with the same architecture.

        Networks present in both learners are copied; a new auxiliary network
        (say the one-step net when cloning into ``fql``) keeps its fresh init.
        """
        cfg = dataclasses.replace(self.cfg, **overrides)
        other = Learner(cfg, self.state_dim, self.action_dim)
        mine_n, mine_o = self.nets(), self.optimizers()
        other.load_state({k: mine_n.get(k, v) for k, v in other.nets().items()},
                         {k: mine_o.get(k, v) for k, v in other.optimizers().items()})
        other.step_count = self.step_count
        if cfg.seed == self.cfg.seed:
            other.streams = copy.deepcopy(self.streams)
        return other


# --- step functions -------------------------------------------------------


def _bc_step(state: Learner, batch: Batch) -> StepMetrics:
    rng = state.rng("path")
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    lv = state.value_update(batch, draw) if state.value is not None else 0.0
    lp, gn = state.cfm_update(batch, draw)
    if state.onestep is not None:
        ld, gd = state.onestep_update(batch, state.rng("policy"), q_weight=0.0)
        lp += ld
        gn = math.hypot(gn, gd)
    state._log("target")
    state.critic.update_targets(state.cfg.eta)
    return StepMetrics(0, lc, lv, lp, gn)


def qflow_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
               rng: np.random.Generator | None = None) -> StepMetrics:
    """Critic, intermediate value, value-gradient matching, target update."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    lv = state.value_update(batch, draw)
    lp, gn = state.cfm_update(batch, draw, target=qflow_target(state, batch, draw, cfg.lam))
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, lv, lp, gn)


def qflow_target(state: Learner, batch: Batch, draw: PathDraw, lam: float) -> np.ndarray:
    """Guided velocity target; a plain array, so no gradient flows through it."""
    grad = state.value.grad_x(batch.s, draw.x_tau, draw.tau)
    return guided_target(draw.u, grad, lam)


def outer_guidance_target(state: Learner, batch: Batch, draw: PathDraw, lam: float) -> np.ndarray:
    tape = Tape()
    xn = tape.variable(draw.x_tau)
    grad = tape.grad_wrt_input(tape.sum(state.critic.node(tape, batch.s, xn)), xn)
    return guided_target(draw.u, grad, lam)


def outer_guidance_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
                        rng: np.random.Generator | None = None) -> StepMetrics:
    """Like :func:`qflow_step` but the guidance gradient comes from the outer critic at ``x_tau``."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    lp, gn = state.cfm_update(batch, draw, target=outer_guidance_target(state, batch, draw, cfg.lam))
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, 0.0, lp, gn)


def fbrac_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
               rng: np.random.Generator | None = None) -> StepMetrics:
    """``-Q(s, Psi(x0)) + alpha * CFM`` with gradients through every Euler step."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    tape = Tape()
    params = state.policy.net.bind(tape)
    x0 = None if math.isinf(cfg.alpha) else state.rng("policy").standard_normal(batch.a.shape)
    loss = fbrac_loss(state, tape, params, batch, draw, x0, cfg.alpha)
    gn = state.apply_policy_loss(tape, params, loss)
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, 0.0, float(loss.value), gn)


def fbrac_loss(state: Learner, tape: Tape, params, batch: Batch, draw: PathDraw, x0, alpha: float):
    """``-Q(s, Psi(x0)) + alpha * CFM`` on ``tape``; ``alpha = inf`` keeps only the CFM term."""
    cfm = matching_loss(state.policy, tape, params, draw.x_tau, draw.tau, batch.s, draw.u)
    if math.isinf(alpha):
        return cfm
    a_pi = flow_map(state.policy, x0, 0.0, batch.s, on_tape=True, tape=tape, params=params)
    q = tape.mean(state.critic.node(tape, batch.s, a_pi))
    return tape.add(tape.scale(q, -1.0), tape.scale(cfm, alpha))


def ivm_bptt_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
                  rng: np.random.Generator | None = None) -> StepMetrics:
    """Maximize V at the on-tape partial rollout ``Psi_{tau,0}(x0)`` plus ``alpha * CFM``."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    lv = state.value_update(batch, draw)
    tape = Tape()
    params = state.policy.net.bind(tape)
    loss = ivm_bptt_loss(state, tape, params, batch, draw, cfg.alpha)
    gn = state.apply_policy_loss(tape, params, loss)
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, lv, float(loss.value), gn)


def ivm_bptt_loss(state: Learner, tape: Tape, params, batch: Batch, draw: PathDraw, alpha: float):
    """``-V(s, Psi_{tau,0}(x0), tau) + alpha * CFM`` with BPTT through the partial rollout."""
    cfm = matching_loss(state.policy, tape, params, draw.x_tau, draw.tau, batch.s, draw.u)
    if math.isinf(alpha):
        return cfm
    x_part = integrate(state.policy, draw.x0, 0.0, draw.tau, batch.s, tape, params)
    v = tape.mean(state.value.node(tape, batch.s, x_part, draw.tau))
    return tape.add(tape.scale(v, -1.0), tape.scale(cfm, alpha))


def fql_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
             rng: np.random.Generator | None = None) -> StepMetrics:
    """Flow net by CFM only; one-step net by ``alpha * distill - Q``."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    ld, gd = state.onestep_update(batch, state.rng("policy"), q_weight=1.0)
    lp, gn = state.cfm_update(batch, draw)
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, 0.0, lp + ld, math.hypot(gn, gd))


def fawac_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
               rng: np.random.Generator | None = None) -> StepMetrics:
    """CFM with per-sample weights ``exp(beta * (Q - mean Q))`` clipped to [0, 100]."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    w = advantage_weights(q_value(state.critic, batch.s, batch.a, use_target=True), cfg.beta)
    lp, gn = state.cfm_update(batch, draw, weights=w)
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, 0.0, lp, gn)


def advantage_weights(q: np.ndarray, beta: float, clip: float = 100.0) -> np.ndarray:
    z = beta * (q - q.mean())
    return np.clip(np.exp(np.minimum(z, math.log(clip))), 0.0, clip)


def rejection_step(state: Learner, batch: Batch, cfg: TrainConfig | None = None,
                   rng: np.random.Generator | None = None) -> StepMetrics:
    """The policy stays a behavior-cloned flow; only the critic keeps learning."""
    cfg = state.cfg if cfg is None else cfg
    rng = state.rng("path") if rng is None else rng
    draw = draw_path(rng, batch.a)
    lc = state.critic_update(batch)
    lp, gn = state.cfm_update(batch, draw)
    state._log("target")
    state.critic.update_targets(cfg.eta)
    return StepMetrics(0, lc, 0.0, lp, gn)


def rejection_policy(state: Learner, s: np.ndarray, n_candidates: int, rng: np.random.Generator) -> np.ndarray:
    """Best of ``n_candidates`` flow samples per state under the online critic.

    Ties go to the first candidate.
    """
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    n = s.shape[0]
    s_rep = np.repeat(s, n_candidates, axis=0)
    cand = sample_action(state.policy, s_rep, rng)
    q = q_value(state.critic, s_rep, cand).reshape(n, n_candidates)
    best = np.argmax(q, axis=1)
    return cand.reshape(n, n_candidates, -1)[np.arange(n), best]


STEP_FUNCTIONS: dict[str, Callable] = {
    "qflow": qflow_step,
    "fbrac": fbrac_step,
    "fql": fql_step,
    "fawac": fawac_step,
    "rejection": rejection_step,
    "ivm_bptt": ivm_bptt_step,
    "outer_guidance": outer_guidance_step,
}


# --- experiment driver ----------------------------------------------------


def sample_batch(ds: OfflineDataset2D, batch_size: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(0, len(ds), size=batch_size)
    return Batch.bandit(ds.actions[idx], ds.rewards[idx])


def phase_steps(cfg: TrainConfig, n_data: int) -> tuple[int, int]:
    per_epoch = math.ceil(n_data / cfg.batch_size)
    bc = cfg.bc_steps if cfg.bc_steps is not None else cfg.bc_epochs * per_epoch
    rl = cfg.steps if cfg.steps is not None else cfg.rl_epochs * per_epoch
    return bc, rl


def train(learner: Learner, ds: OfflineDataset2D, bc_steps: int, rl_steps: int,
          on_step: Callable[[str, StepMetrics], None] | None = None, on_phase_end: Callable | None = None):
    """Run both phases in place, reporting every step to ``on_step``."""
    rng = learner.rng("batch")
    for _ in range(bc_steps):
        m = learner.bc_step(sample_batch(ds, learner.cfg.batch_size, rng))
        if on_step:
            on_step("bc", m)
    if on_phase_end:
        on_phase_end(learner)
    for _ in range(rl_steps):
        m = learner.rl_step(sample_batch(ds, learner.cfg.batch_size, rng))
        if on_step:
            on_step("rl", m)
    return learner


def _version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_experiment(cfg: TrainConfig, dataset: OfflineDataset2D, sink, evaluate: bool = True) -> dict:
    """BC then RL phase, streaming metrics and writing every artifact to ``sink``.

    Returns the run manifest (also written to ``sink/manifest.json``).
    """
    from .analysis import consistency_report, sample_metrics, write_consistency
    from .svg import scatter_svg

    cfg = cfg.resolved()
    sink = Path(sink)
    try:
        sink.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {sink}: {e}") from e
    bc_steps, rl_steps = phase_steps(cfg, len(dataset))
    learner = Learner(cfg)
    artifacts: dict[str, str] = {}
    data_csv, data_json = save_dataset(dataset, sink / "dataset.csv")
    artifacts["dataset"] = data_csv.name
    artifacts["dataset_meta"] = data_json.name
    summary: dict = {}

    def bc_done(lr: Learner):
        lr.save(sink / "bc_checkpoint.npz", {"phase": "bc"})
        artifacts["bc_checkpoint"] = "bc_checkpoint.npz"
        if evaluate:
            bc = sample_metrics(lr.sample, dataset, dataset.reward_spec, cfg.eval_samples, lr.rng("eval/bc"), cfg.eps)
            summary["bc_mean_reward"] = bc["mean_reward"]
            summary["bc_on_manifold_frac"] = bc["on_manifold_frac"]

    metrics_path = sink / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def on_step(phase, m: StepMetrics):
            writer.writerow(m.row(cfg.record_wall_clock))

        train(learner, dataset, bc_steps, rl_steps, on_step, bc_done)
    artifacts["metrics"] = metrics_path.name
    learner.save(sink / "final_checkpoint.npz", {"phase": "final"})
    artifacts["final_checkpoint"] = "final_checkpoint.npz"

    if evaluate:
        eval_rng = learner.rng("eval")
        samples = learner.sample(cfg.eval_samples, eval_rng)
        summary.update(sample_metrics(lambda n, r: samples, dataset, dataset.reward_spec, len(samples), eval_rng, cfg.eps))
        rewards = dataset.reward_spec.scaled(samples)
        with open(sink / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "reward"])
            for (x, y), r in zip(samples, rewards):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(r))])
        artifacts["samples"] = "samples.csv"
        (sink / "samples.svg").write_text(scatter_svg(samples, rewards, title=f"{cfg.method} on {dataset.name}",
                                                      background=dataset.actions))
        artifacts["samples_svg"] = "samples.svg"
        if learner.value is not None:
            rep = consistency_report(learner.value, learner.policy, dataset, n_states=1, n_trajs=1024,
                                     rng=learner.rng("eval/consistency"))
            artifacts.update(write_consistency(rep, sink))
            summary["consistency_max_normalized"] = float(np.max(rep.mean_normalized))

    manifest = {
        "schema_version": 1,
        "version": _version(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method_label": "FQL-style" if cfg.method == "fql" else cfg.method,
        "dataset": {"name": dataset.name, "fingerprint": file_fingerprint(data_csv), **dataset.metadata()},
        "bc_steps": bc_steps,
        "rl_steps": rl_steps,
        "artifacts": artifacts,
        "summary": summary,
    }
    for name in artifacts.values():
        if not (sink / name).exists():
            raise FileNotFoundError(f"artifact {sink / name} missing at manifest time")
    (sink / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
