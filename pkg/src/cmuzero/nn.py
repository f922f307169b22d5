"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable computation is recorded on a :class:`Tape` as a list of
:class:`Var` nodes in creation order, which is already a topological order.
``backward`` walks the list in reverse and accumulates parameter gradients
into the owning :class:`ParameterStore`.

The dense networks here have two evaluation paths: a taped one used for
training and a plain numpy one used for planning, which never allocates
tape nodes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class ConfigurationError(ValueError):
    """Shape or architecture mismatch."""


class UsageError(RuntimeError):
    """API used out of order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    """Non-finite values reached the optimizer or the loss."""


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named float64 tensors with matching gradient slots."""

    def __init__(self, params: dict[str, np.ndarray] | None = None, version: int = 0):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = version
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def snapshot(self) -> "ParameterStore":
        """Immutable value copy, safe to share between threads."""
        snap = ParameterStore(version=self.version)
        for name, value in self.params.items():
            arr = value.copy()
            arr.setflags(write=False)
            snap.params[name] = arr
            snap.grads[name] = np.zeros_like(arr)
        return snap

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.params.items()}, self.version)

    def l2(self) -> float:
        return float(sum(np.sum(v * v) for v in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            value = self.params[name]
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        """Write an ``.npz`` checkpoint; ``meta`` is stored as a JSON header."""
        header = {"format": 1, "version": self.version,
                  "shapes": {k: list(v.shape) for k, v in self.params.items()},
                  "meta": meta or {}}
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParameterStore", dict]:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            store = cls(version=int(header["version"]))
            for name, shape in header["shapes"].items():
                arr = data[f"p:{name}"]
                if list(arr.shape) != shape:
                    raise ConfigurationError(f"checkpoint shape mismatch for {name}")
                store.add(name, arr)
        return store, header.get("meta", {})


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParameterStore, lr: float) -> None:
        for name, g in store.grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in store.params.items():
            g = store.grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        store.zero_grad()
        store.version += 1


def optimizer_step(store: ParameterStore, lr: float, adam: Adam) -> ParameterStore:
    adam.step(store, lr)
    return store


# ---------------------------------------------------------------------------
# tape


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "param_name")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple = (),
                 backward_fn: Callable | None = None, param_name: str | None = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


class Tape:
    """Records one forward computation for later reverse-mode replay."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict[str, Var] = {}
        self._store: ParameterStore | None = None

    def constant(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def param(self, store: ParameterStore, name: str) -> Var:
        if self._store is not None and self._store is not store:
            raise UsageError("a tape can only track parameters of one store")
        self._store = store
        var = self._params.get(name)
        if var is None:
            var = Var(self, store.params[name], param_name=name)
            self._params[name] = var
            self.nodes.append(var)
        return var

    def record(self, value: np.ndarray, parents: tuple, backward_fn: Callable) -> Var:
        var = Var(self, value, parents, backward_fn)
        self.nodes.append(var)
        return var

    def backward(self, output: Var, output_gradient=1.0) -> None:
        """Accumulate d(output_gradient . output)/d(param) into the store."""
        if not self.nodes or output.tape is not self:
            raise UsageError("backward called without a recorded forward pass")
        for node in self.nodes:
            node.grad = None
        output.grad = np.broadcast_to(np.asarray(output_gradient, dtype=np.float64),
                                      output.value.shape).copy()
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not isinstance(parent, Var):
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        if self._store is not None:
            for name, var in self._params.items():
                if var.grad is not None:
                    self._store.grads[name] += var.grad


def backward(tape: Tape, output: Var, output_gradient=1.0) -> None:
    tape.backward(output, output_gradient)


# ---------------------------------------------------------------------------
# primitive ops


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("operation needs at least one Var operand")


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return tape.record(av @ bv, (a, b), back)


def linear(x, w: Var, b: Var) -> Var:
    """x @ w + b for x of shape (..., in)."""
    tape = _tape_of(x, w, b)
    x = _lift(tape, x)
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ConfigurationError(f"linear shape mismatch {xv.shape} @ {wv.shape}")

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)

    return tape.record(xv @ wv + b.value, (x, w, b), back)


def leaky_relu(a: Var, slope: float = LEAKY_SLOPE) -> Var:
    mask = np.where(a.value > 0, 1.0, slope)
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Hard clamp; gradient passes only where the input is inside the range."""
    inside = (a.value >= lo) & (a.value <= hi)
    return a.tape.record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a: Var, shape: tuple) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return tape.record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_last(a: Var, start: int, stop: int) -> Var:
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return a.tape.record(a.value[..., start:stop], (a,), back)


def log_softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return a.tape.record(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def scale_gradient(a: Var, factor: float) -> Var:
    """Identity on the forward pass; multiplies the incoming gradient."""
    return a.tape.record(a.value, (a,), lambda g: (g * factor,))


def stop_gradient(a: Var) -> Var:
    return a.tape.constant(a.value)


def minmax_scale(a: Var) -> Var:
    """Map each vector (last axis) affinely so its min is -1 and max is +1.

    Constant vectors map to zeros with zero gradient.
    """
    s = a.value
    lo = s.min(axis=-1, keepdims=True)
    hi = s.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span <= 0.0
    safe = np.where(flat, 1.0, span)
    out = np.where(flat, 0.0, (2.0 * s - lo - hi) / safe)
    arg_lo = s.argmin(axis=-1)
    arg_hi = s.argmax(axis=-1)

    def back(g):
        g = np.where(flat, 0.0, g)
        grad = 2.0 * g / safe
        d_lo = np.sum(g * 2.0 * (s - hi), axis=-1) / safe[..., 0] ** 2
        d_hi = np.sum(g * 2.0 * (lo - s), axis=-1) / safe[..., 0] ** 2
        flat_grad = grad.reshape(-1, s.shape[-1])
        rows = np.arange(flat_grad.shape[0])
        np.add.at(flat_grad, (rows, arg_lo.reshape(-1)), d_lo.reshape(-1))
        np.add.at(flat_grad, (rows, arg_hi.reshape(-1)), d_hi.reshape(-1))
        return (flat_grad.reshape(s.shape),)

    return a.tape.record(out, (a,), back)


def minmax_scale_array(s: np.ndarray) -> np.ndarray:
    """Untaped version of :func:`minmax_scale`."""
    lo = s.min(axis=-1, keepdims=True)
    hi = s.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span <= 0.0
    return np.where(flat, 0.0, (2.0 * s - lo - hi) / np.where(flat, 1.0, span))


# ---------------------------------------------------------------------------
# dense networks

ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class DenseNetworkSpec:
    widths: tuple[int, ...]
    hidden_activation: str = "leaky_relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("a dense network needs an input and at least one layer")
        if any(int(w) < 1 for w in self.widths):
            raise ConfigurationError(f"all widths must be >= 1, got {self.widths}")
        if self.hidden_activation != "leaky_relu":
            raise ConfigurationError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unsupported output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class DenseNetwork:
    """Fully connected stack whose weights live in a shared ParameterStore."""

    def __init__(self, spec: DenseNetworkSpec, prefix: str):
        self.spec = spec
        self.prefix = prefix
        self.names = [(f"{prefix}.W{i}", f"{prefix}.b{i}") for i in range(spec.n_layers)]

    def init(self, store: ParameterStore, rng: np.random.Generator) -> None:
        for (wn, bn), fan_in, fan_out in zip(self.names, self.spec.widths[:-1], self.spec.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            store.add(wn, rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            store.add(bn, rng.uniform(-bound, bound, size=(fan_out,)))

    def check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.spec.widths[0]:
            raise ConfigurationError(
                f"{self.prefix}: input width {x.shape[-1]} != {self.spec.widths[0]}")

    def __call__(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        """Untaped evaluation."""
        self.check_input(x)
        params = store.params
        last = self.spec.n_layers - 1
        h = x
        for i, (wn, bn) in enumerate(self.names):
            h = h @ params[wn] + params[bn]
            if i < last:
                h = np.maximum(h, LEAKY_SLOPE * h)
        if self.spec.output_activation == "tanh":
            h = np.tanh(h)
        return h

    def forward(self, store: ParameterStore, x, tape: Tape) -> Var:
        """Taped evaluation; ``x`` may be an array or a Var on the same tape."""
        x = _lift(tape, x)
        self.check_input(x.value)
        last = self.spec.n_layers - 1
        h = x
        for i, (wn, bn) in enumerate(self.names):
            h = linear(h, tape.param(store, wn), tape.param(store, bn))
            if i < last:
                h = leaky_relu(h)
        if self.spec.output_activation == "tanh":
            h = tanh(h)
        return h


def forward(spec: DenseNetworkSpec, params: ParameterStore, x, tape: Tape, prefix: str = "net") -> Var:
    return DenseNetwork(spec, prefix).forward(params, x, tape)
