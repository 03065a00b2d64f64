"""MLPs, time embedding, Adam and target-network updates."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation, Node, NonFiniteError, Tape, gelu, relu

__all__ = [
    "MlpSpec",
    "Mlp",
    "init_mlp",
    "fourier_embed",
    "AdamState",
    "adam_step",
    "polyak_update",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"relu": relu, "gelu": gelu}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    final_activation: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        # input_dim may be 0 only when nothing feeds the network, which never
        # happens here; keep the rule strict.
        if any(w < 1 for w in widths):
            raise ContractViolation(f"all MLP widths must be >= 1, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.final_activation != "none":
            raise ContractViolation(f"unsupported final activation {self.final_activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))


class Mlp:
    """Fully connected network ``x -> W_L(act(... act(x W_1 + b_1)))``.

    ``params`` alternates weights of shape ``(fan_in, fan_out)`` and biases of
    shape ``(fan_out,)``. The same parameter list is used by the numpy fast
    path (:meth:`predict`) and the tape path (:meth:`__call__`); both apply the
    same numpy operations in the same order, so their values agree bit for bit.
    """

    def __init__(self, spec: MlpSpec, params: list[np.ndarray]):
        self.spec = spec
        self.params = params
        shapes = []
        for fi, fo in spec.layer_shapes:
            shapes += [(fi, fo), (fo,)]
        got = [p.shape for p in params]
        if got != shapes:
            raise ContractViolation(f"parameter shapes {got} do not match spec {shapes}")

    def predict(self, x: np.ndarray) -> np.ndarray:
        act = _ACTIVATIONS[self.spec.activation]
        h = x
        n = len(self.params) // 2
        for i in range(n):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n - 1:
                h = act(h)
        return h

    def bind(self, tape: Tape, trainable: bool = True) -> list[Node]:
        """Place the parameters on ``tape`` as leaves."""
        make = tape.variable if trainable else tape.constant
        return [make(p) for p in self.params]

    def __call__(self, tape: Tape, x, params: Sequence[Node] | None = None) -> Node:
        if params is None:
            params = self.bind(tape, trainable=False)
        n = len(params) // 2
        h = x
        for i in range(n):
            h = tape.add(tape.matmul(h, params[2 * i]), params[2 * i + 1])
            if i < n - 1:
                h = tape.forward_op(self.spec.activation, h)
        return h

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in self.params])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def init_mlp(spec: MlpSpec, seed) -> Mlp:
    """Fan-in uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for fi, fo in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fi)
        params.append(rng.uniform(-bound, bound, size=(fi, fo)))
        params.append(np.zeros(fo))
    return Mlp(spec, params)


def fourier_embed(tau, dim: int = 16) -> np.ndarray:
    """``[sin(2 pi f_i tau), cos(2 pi f_i tau)]`` with ``f_i = 2**i``.

    Scalar ``tau`` gives a vector of length ``dim``; an array of ``n`` times
    (shape ``(n,)`` or ``(n, 1)``) gives an ``(n, dim)`` matrix.
    """
    if dim < 2 or dim % 2:
        raise ContractViolation(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ContractViolation("flow time must lie in [0, 1]")
    freqs = 2.0 ** np.arange(dim // 2)
    if t.ndim == 0:
        ang = 2 * np.pi * freqs * t
        return np.concatenate([np.sin(ang), np.cos(ang)])
    ang = 2 * np.pi * t.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, name: str = "loss") -> None:
    """Bias-corrected Adam update, in place."""
    if len(grads) != len(params):
        raise ContractViolation(f"{len(grads)} gradients for {len(params)} parameters")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} of the {name} loss")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def polyak_update(target: Mlp, online: Mlp, eta: float) -> None:
    """``target <- eta * online + (1 - eta) * target``, in place."""
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation(f"polyak coefficient must be in [0, 1], got {eta}")
    for t, o in zip(target.params, online.params):
        if t.shape != o.shape:
            raise ContractViolation(f"polyak: target shape {t.shape} vs online shape {o.shape}")
    if eta == 0.0:
        return
    for t, o in zip(target.params, online.params):
        if eta == 1.0:
            np.copyto(t, o)
        else:
            t *= 1.0 - eta
            t += eta * o


def _spec_dict(spec: MlpSpec) -> dict:
    d = asdict(spec)
    d["hidden"] = list(spec.hidden)
    return d


def save_checkpoint(path, nets: dict[str, Mlp], optimizers: dict[str, AdamState] | None = None, meta: dict | None = None) -> Path:
    """Write networks, optimizer moments and metadata to one ``.npz`` file.

    Arrays are stored verbatim, so a load reproduces every bit.
    """
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "nets": {}, "optimizers": {}}
    arrays = {}
    for name, net in nets.items():
        header["nets"][name] = {"spec": _spec_dict(net.spec), "n": len(net.params)}
        for i, p in enumerate(net.params):
            arrays[f"net/{name}/{i}"] = p
    for name, st in (optimizers or {}).items():
        header["optimizers"][name] = {
            "step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "n": len(st.m),
        }
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"opt/{name}/m/{i}"] = m
            arrays[f"opt/{name}/v/{i}"] = v
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict[str, AdamState], dict]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, info in header["nets"].items():
            spec = MlpSpec(**info["spec"])
            nets[name] = Mlp(spec, [z[f"net/{name}/{i}"].copy() for i in range(info["n"])])
        opts = {}
        for name, info in header["optimizers"].items():
            n = info.pop("n")
            opts[name] = AdamState(
                [z[f"opt/{name}/m/{i}"].copy() for i in range(n)],
                [z[f"opt/{name}/v/{i}"].copy() for i in range(n)],
                **info,
            )
    return nets, opts, header["meta"]
