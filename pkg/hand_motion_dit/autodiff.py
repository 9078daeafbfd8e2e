"""Reverse-mode automatic differentiation over dense float64 arrays.

An `NdArray` wraps a `numpy.ndarray`. Differentiable operations executed
while a `Tape` is active are recorded on it in execution order; `backward`
walks the tape in reverse and returns the gradient of a scalar loss with
respect to every array that requires one.

Broadcasting is deliberately narrow: binary operations accept equal shapes or
a right operand whose shape is a trailing suffix of the left operand's shape
(a bias). Anything else is a `DimensionError`. Repetition along a new axis is
an explicit operation, `repeat_axis`.

Every operation checks its output for NaN/Inf and raises `NonFiniteError`.
"""

from __future__ import annotations

import builtins
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from hand_motion_dit.errors import DimensionError, NonFiniteError, NonScalarLossError

_node_ids = itertools.count()

_active_tape: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "active_tape", default=None
)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NdArray:
    """A float64 array node.

    Leaves that should receive gradients are built with `requires_grad=True`;
    every other array is a constant as far as the tape is concerned.
    """

    __slots__ = ("data", "requires_grad", "name", "node")

    # numpy must defer to our reflected operators (ndarray - NdArray).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(name or "input")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node = next(_node_ids)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> NdArray:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.name = None
        out.node = next(_node_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"NdArray(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> NdArray:
        return add(self, other)

    def __radd__(self, other) -> NdArray:
        return add(_as_node(other), self)

    def __sub__(self, other) -> NdArray:
        return sub(self, other)

    def __rsub__(self, other) -> NdArray:
        return sub(_as_node(other), self)

    def __mul__(self, other) -> NdArray:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> NdArray:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_node(other), self)

    def __truediv__(self, other) -> NdArray:
        if not isinstance(other, (int, float)):
            raise TypeError("NdArray only supports division by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> NdArray:
        return scale(self, -1.0)

    def __matmul__(self, other) -> NdArray:
        return matmul(self, other)


def constant(data) -> NdArray:
    return NdArray(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> NdArray:
    return NdArray(data, requires_grad=True, name=name)


def _as_node(x) -> NdArray:
    if isinstance(x, NdArray):
        return x
    return NdArray(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[NdArray, ...]
    output: NdArray
    backward: BackwardRule


class Tape:
    """Ordered record of the differentiable operations executed while the
    tape is active.

    Use as a context manager. Tapes are bound through a context variable, so
    independent tapes on separate threads never see each other's entries.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


def _result(
    op: str, data: np.ndarray, inputs: Sequence[NdArray], rule: BackwardRule
) -> NdArray:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    requires_grad = any(i.requires_grad for i in inputs)
    out = NdArray._wrap(data, requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(op, tuple(inputs), out, rule))
    return out


class Gradients(Mapping[int, np.ndarray]):
    """Gradients by node id. Indexing with an `NdArray` returns zeros for
    arrays the loss does not depend on."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, key: int | NdArray) -> np.ndarray:
        if isinstance(key, NdArray):
            g = self._grads.get(key.node)
            if g is None:
                return np.zeros_like(key.data)
            return g
        return self._grads[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def for_params(self, params: Mapping[str, NdArray]) -> dict[str, np.ndarray]:
        return {name: self[p] for name, p in params.items()}


def backward(tape: Tape, loss: NdArray) -> Gradients:
    """Gradient of the scalar `loss` with respect to every node on `tape`.

    The tape is not modified, so calling this twice yields identical results.
    """
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.get(entry.output.node)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node in grads:
                grads[inp.node] = grads[inp.node] + gi
            else:
                grads[inp.node] = gi
    return Gradients(grads)


def _bias_shape(op: str, a: NdArray, b: NdArray) -> bool:
    """True when `b` is a trailing-suffix bias of `a`; False for equal shapes."""
    if a.shape == b.shape:
        return False
    if 0 < b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return True
    raise DimensionError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g.reshape((-1,) + shape).sum(axis=0)


def add(a, b) -> NdArray:
    a, b = _as_node(a), _as_node(b)
    if a.ndim < b.ndim:
        a, b = b, a
        swapped = True
    else:
        swapped = False
    bias = _bias_shape("add", a, b)
    b_shape = b.shape

    def rule(g):
        gb = _reduce_to(g, b_shape) if bias else g
        return (gb, g) if swapped else (g, gb)

    inputs = (b, a) if swapped else (a, b)
    return _result("add", a.data + b.data, inputs, rule)


def sub(a, b) -> NdArray:
    a, b = _as_node(a), _as_node(b)
    bias = _bias_shape("sub", a, b)
    b_shape = b.shape

    def rule(g):
        gb = -_reduce_to(g, b_shape) if bias else -g
        return g, gb

    return _result("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> NdArray:
    a, b = _as_node(a), _as_node(b)
    if a.ndim < b.ndim:
        a, b = b, a
    bias = _bias_shape("mul", a, b)
    av, bv = a.data, b.data

    def rule(g):
        ga = g * bv
        gb = g * av
        return ga, (_reduce_to(gb, bv.shape) if bias else gb)

    return _result("mul", av * bv, (a, b), rule)


def scale(a: NdArray, c: float) -> NdArray:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> NdArray:
    """Matrix product over the last two axes.

    `b` is either a 2-D weight shared across the leading axes of `a`, or has
    exactly the leading axes of `a` (a batched product)."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("matmul", a.shape, b.shape)

    if bv.ndim == 2:
        if av.shape[-1] != bv.shape[0]:
            raise DimensionError("matmul", a.shape, b.shape)
        k, n = bv.shape

        def rule(g):
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if (
            av.ndim != bv.ndim
            or av.shape[:-2] != bv.shape[:-2]
            or av.shape[-1] != bv.shape[-2]
        ):
            raise DimensionError("matmul", a.shape, b.shape)

        def rule(g):
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
            return ga, gb

    return _result("matmul", av @ bv, (a, b), rule)


def transpose_last2(x: NdArray) -> NdArray:
    if x.ndim < 2:
        raise DimensionError("transpose_last2", x.shape)
    return _result(
        "transpose_last2",
        np.swapaxes(x.data, -1, -2),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(x: NdArray, shape: Sequence[int]) -> NdArray:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", x.shape, tuple(shape))
    return _result("reshape", out, (x,), lambda g: (g.reshape(original),))


def repeat_axis(x: NdArray, axis: int, n: int) -> NdArray:
    """Insert a new axis at `axis` and repeat `x` `n` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result("repeat_axis", out, (x,), lambda g: (g.sum(axis=axis),))


def concat_lastdim(xs: Sequence[NdArray]) -> NdArray:
    xs = [_as_node(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError("concat_lastdim", *(y.shape for y in xs))
    bounds = np.cumsum([x.shape[-1] for x in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _result(
        "concat_lastdim", np.concatenate([x.data for x in xs], axis=-1), xs, rule
    )


def _slice_lastdim(x: NdArray, start: int, stop: int) -> NdArray:
    full = x.shape

    def rule(g):
        out = np.zeros(full)
        out[..., start:stop] = g
        return (out,)

    return _result("split_lastdim", x.data[..., start:stop].copy(), (x,), rule)


def split_lastdim(x: NdArray, parts: int | Sequence[int]) -> list[NdArray]:
    """Split the last axis into `parts` equal chunks or chunks of given sizes."""
    width = x.shape[-1]
    if isinstance(parts, int):
        if parts <= 0 or width % parts:
            raise DimensionError("split_lastdim", x.shape, (parts,))
        sizes = [width // parts] * parts
    else:
        sizes = list(parts)
        if builtins.sum(sizes) != width:
            raise DimensionError("split_lastdim", x.shape, tuple(sizes))
    out = []
    start = 0
    for size in sizes:
        out.append(_slice_lastdim(x, start, start + size))
        start += size
    return out


def gelu(x: NdArray) -> NdArray:
    """GELU, tanh approximation."""
    v = x.data
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (v + 0.044715 * v**3))
    out = 0.5 * v * (1.0 + t)

    def rule(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result("gelu", out, (x,), rule)


def embedding_lookup(table: NdArray, ids: np.ndarray) -> NdArray:
    """Rows of a 2-D `table` selected by integer `ids` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding_lookup", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding_lookup", table.shape, ids.shape)
    shape = table.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result("embedding_lookup", table.data[ids], (table,), rule)


def softmax_lastdim(x: NdArray) -> NdArray:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim", x.shape)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax_lastdim", p, (x,), rule)


def layer_norm(
    x: NdArray,
    gain: Optional[NdArray] = None,
    bias: Optional[NdArray] = None,
    eps: float = 1e-5,
) -> NdArray:
    """Normalise the last axis to zero mean and unit variance, then apply an
    optional affine map. `eps` is added to the variance inside the root."""
    width = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (width,):
            raise DimensionError("layer_norm", x.shape, p.shape)

    v = x.data
    centered = v - v.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    inputs: list[NdArray] = [x]
    if gain is not None:
        inputs.append(gain)
    if bias is not None:
        inputs.append(bias)

    def rule(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray] = [gx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, width).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, width).sum(axis=0))
        return grads

    return _result("layer_norm", out, inputs, rule)


def sum(x: NdArray) -> NdArray:
    shape = x.shape
    return _result(
        "sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),)
    )


def mean(x: NdArray) -> NdArray:
    shape, n = x.shape, x.size
    return _result(
        "mean",
        np.array(x.data.sum() / n),
        (x,),
        lambda g: (np.full(shape, float(g) / n),),
    )


def mse(a, b) -> NdArray:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise DimensionError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def rule(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return _result("mse", np.array((diff * diff).sum() / n), (a, b), rule)


def rms(x: NdArray) -> NdArray:
    """Root mean square of all elements. The gradient at zero is taken as 0."""
    n = x.size
    value = math.sqrt(float((x.data * x.data).sum()) / n)

    def rule(g):
        if value == 0.0:
            return (np.zeros(x.shape),)
        return ((float(g) / (n * value)) * x.data,)

    return _result("rms", np.array(value), (x,), rule)


def numerical_gradient(
    f: Callable[[], float], param: NdArray, index: tuple[int, ...], h: float = 1e-5
) -> float:
    """Central finite difference of `f` with respect to one entry of `param`."""
    original = param.data[index]
    param.data[index] = original + h
    plus = f()
    param.data[index] = original - h
    minus = f()
    param.data[index] = original
    return (plus - minus) / (2.0 * h)


@dataclass
class OptimizerConfig:
    """Adam hyper-parameters."""

    lr: float = 1e-4
    """Learning rate."""

    beta1: float = 0.9
    """Decay rate of the first-moment estimate."""

    beta2: float = 0.999
    """Decay rate of the second-moment estimate."""

    eps: float = 1e-8
    """Added to the root of the second moment."""


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, NdArray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> AdamState:
    """One bias-corrected Adam update. Parameters are updated in place; the
    new optimizer state is returned."""
    step = state.step + 1
    new = AdamState(step=step)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError("adam_step", p.shape, g.shape)
        m = beta1 * state.m.get(name, np.zeros(p.shape)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros(p.shape)) + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new.m[name] = m
        new.v[name] = v
    return new


class Adam:
    def __init__(self, params: Mapping[str, NdArray], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        c = self.config
        self.state = adam_step(
            self.params, grads, self.state, c.lr, c.beta1, c.beta2, c.eps
        )
