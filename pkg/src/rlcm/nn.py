"""Dense float64 tensors with a recording tape, MLPs and Adam.

Everything the models need to train runs on top of this module: a
``Tensor`` wraps a numpy array, operations performed while a ``Tape`` is
active are recorded, and ``backward`` sweeps the record in reverse to
deposit gradients into a ``ParamStore``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# tensors and the tape

_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "param_name", "store")

    def __init__(self, data, requires_grad: bool = False, param_name: str | None = None,
                 store: "ParamStore | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.param_name = param_name
        self.store = store

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    fn: Callable[..., np.ndarray]
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations executed inside ``with Tape():``."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> bool:
        """Recompute every recorded op from its recorded inputs; True if all outputs match exactly."""
        for rec in self.records:
            out = rec.fn(*(t.data for t in rec.inputs))
            if not np.array_equal(out, rec.output.data):
                return False
        return True


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _op(name: str, fn, inputs: tuple[Tensor, ...], vjp_maker) -> Tensor:
    out = Tensor(fn(*(t.data for t in inputs)))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(name, fn, inputs, out, vjp_maker(out)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("add", np.add, (a, b),
               lambda out: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("sub", np.subtract, (a, b),
               lambda out: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("mul", np.multiply, (a, b),
               lambda out: lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("div", np.divide, (a, b),
               lambda out: lambda g: (_unbroadcast(g / b.data, a.shape),
                                      _unbroadcast(-g * out.data / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _op("neg", np.negative, (a,), lambda out: lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _op("matmul", np.matmul, (a, b),
               lambda out: lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _op("tanh", np.tanh, (a,), lambda out: lambda g: (g * (1.0 - out.data ** 2),))


def silu(a) -> Tensor:
    a = as_tensor(a)

    def fn(x):
        return x / (1.0 + np.exp(-x))

    def vjp(out):
        s = 1.0 / (1.0 + np.exp(-a.data))
        return lambda g: (g * (s + a.data * s * (1.0 - s)),)

    return _op("silu", fn, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _op("exp", np.exp, (a,), lambda out: lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op("log", np.log, (a,), lambda out: lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _op("sqrt", np.sqrt, (a,), lambda out: lambda g: (0.5 * g / out.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _op("square", np.square, (a,), lambda out: lambda g: (2.0 * g * a.data,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def fn(x):
        return np.sum(x, axis=axis)

    def vjp(out):
        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return back

    return _op("sum", fn, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only where the input lies strictly inside."""
    a = as_tensor(a)

    def fn(x):
        return np.clip(x, lo, hi)

    return _op("clip", fn, (a,),
               lambda out: lambda g: (g * ((a.data > lo) & (a.data < hi)),))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(out):
        pick_a = a.data <= b.data
        return lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                          _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _op("minimum", np.minimum, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def fn(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(out):
        bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
        return lambda g: tuple(np.split(g, bounds, axis=axis))

    return _op("concat", fn, ts, vjp)


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def fn(t):
        return t[idx]

    def vjp(out):
        def back(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return (gt,)
        return back

    return _op("take_rows", fn, (table,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _op("reshape", lambda x: np.reshape(x, shape), (a,),
               lambda out: lambda g: (np.reshape(g, a.shape),))


# --------------------------------------------------------------------------
# parameters, gradients, backward

class ParamStore:
    """Named parameter arrays with parallel gradient arrays."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def leaf(self, name: str) -> Tensor:
        return Tensor(self.params[name], requires_grad=True, param_name=name, store=self)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def grad_norm(self) -> float:
        return math.sqrt(float(np.sum([np.sum(g * g) for g in self.grads.values()])))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into the owning ParamStore of every parameter leaf."""
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp.store is not None:
                inp.store.grads[inp.param_name] += gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi
    tape.records.clear()


# --------------------------------------------------------------------------
# MLP

ACTIVATIONS = {"tanh": tanh, "silu": silu}


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str = "",
             store: ParamStore | None = None, out_scale: float = 1.0) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases for each layer."""
    store = store if store is not None else ParamStore()
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        scale = out_scale if i == n_layers - 1 else 1.0
        store.add(f"{prefix}layer{i}.W", scale * rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}layer{i}.b", scale * rng.uniform(-bound, bound, size=(fan_out,)))
    return store


def n_layers(params: ParamStore, prefix: str = "") -> int:
    n = 0
    while f"{prefix}layer{n}.W" in params:
        n += 1
    return n


def mlp_forward(params: ParamStore, x, t_embed=None, c_embed=None, activation: str = "tanh",
                prefix: str = "") -> Tensor:
    """Run ``[x, t_embed, c_embed]`` through the dense layers named ``{prefix}layer{i}``.

    Hidden layers use ``activation``; the last layer is linear.
    """
    parts = [as_tensor(p) for p in (x, t_embed, c_embed) if p is not None]
    h = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    act = ACTIVATIONS[activation]
    depth = n_layers(params, prefix)
    if depth == 0:
        raise DimensionError(f"no layers with prefix {prefix!r}")
    for i in range(depth):
        W = params.leaf(f"{prefix}layer{i}.W")
        b = params.leaf(f"{prefix}layer{i}.b")
        if h.shape[-1] != W.shape[0]:
            raise DimensionError(
                f"layer {prefix}layer{i}: input width {h.shape[-1]} != weight rows {W.shape[0]}")
        h = add(matmul(h, W), b)
        if i < depth - 1:
            h = act(h)
    return h


def time_features(t, n_freq: int = 8) -> np.ndarray:
    """Sinusoidal features of log(t)/4, shape (B, 2*n_freq + 1)."""
    c = np.log(np.atleast_1d(np.asarray(t, dtype=np.float64))).reshape(-1, 1) / 4.0
    freqs = 2.0 ** (np.arange(n_freq) - 2.0)
    ang = c * freqs
    return np.concatenate([c, np.sin(ang), np.cos(ang)], axis=1)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using the gradients held in ``params``."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in params.params.items():
        g = params.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; return the factor."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    norm = params.grad_norm()
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in params.grads.values():
        g *= factor
    return factor
