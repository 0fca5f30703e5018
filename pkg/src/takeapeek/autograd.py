"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node carrying a monotonically
increasing sequence number.  ``backward`` collects the nodes reachable from
the loss, replays them in exact reverse execution order and then releases the
graph, so a tape is consumed by the pass that reads it.

Only scalar-with-tensor broadcasting is supported by the arithmetic ops.
``add_bias`` is the single exception: it adds a tensor matching the trailing
dimensions of its input (biases, positional embeddings) and sums the gradient
back over the leading ones.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

_seq = itertools.count()
_state = threading.local()

TAPT_MAGIC = b"TAPT"


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.output: Tensor | None = None
        self.backward_fn = backward_fn


@dataclass
class Tape:
    """Operations replayed by one backward pass, in execution order."""

    nodes: list[Node] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{name} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = grad_enabled() and any(i.requires_grad for i in inputs)
    if t.requires_grad:
        node = Node(name, tuple(inputs), backward_fn)
        node.output = t
        t.node = node
    return t


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    def back(g):
        return (_reduce_to(g * b.data, a) if a.requires_grad else None,
                _reduce_to(g * a.data, b) if b.requires_grad else None)

    return _record("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def pow(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    if exponent == 0:
        return _record("pow", np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),))
    if (exponent < 0 and np.any(x.data == 0)) or (exponent != int(exponent) and np.any(x.data < 0)):
        raise DomainError(f"pow: exponent {exponent} undefined for this input")
    out = x.data ** exponent

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * x.data ** (exponent - 1)
        return (g * np.where(np.isfinite(local), local, 0.0),)

    return _record("pow", out, (x,), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt needs strictly positive input")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def elementwise(x, op: str, other=None) -> Tensor:
    """Dispatch by name over the elementwise primitives."""
    unary = {"relu": relu, "exp": exp, "log": log, "neg": neg, "sqrt": sqrt}
    if op in unary:
        return unary[op](x)
    if op == "add":
        return add(x, other)
    if op == "mul":
        return mul(x, other)
    if op == "pow":
        return pow(x, other)
    raise ContractError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# shape and reduction
# ----------------------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), back)


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _record("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, xs, back)


def take(x, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    unique = len(np.unique(index)) == index.size

    def back(g):
        full = np.zeros(x.shape)
        moved = np.moveaxis(full, axis, 0)
        if unique:
            moved[index] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", np.take(x.data, index, axis=axis), (x,), back)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; 3-d operands are treated as equal-sized batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _record("matmul", out, (a, b), back)


def add_bias(x, bias) -> Tensor:
    """``x + bias`` where ``bias.shape`` equals the trailing dims of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    k = bias.ndim
    if k == 0 or x.shape[x.ndim - k:] != bias.shape:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - k))
    return _record("add_bias", x.data + bias.data, (x, bias),
                   lambda g: (g, g.sum(axis=lead) if bias.requires_grad else None))


def pointwise_conv(x, w, bias) -> Tensor:
    """1x1 convolution of a ``C_in x H x W`` map with ``C_out x C_in`` weights."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0] or bias.shape != (w.shape[0],):
        raise DimensionError(
            f"pointwise_conv: input {x.shape}, weight {w.shape}, bias {bias.shape} are inconsistent")
    c_in, h, wd = x.shape
    flat = reshape(x, (c_in, h * wd))
    out = matmul(w, flat)
    out = add_bias(transpose(out), bias)
    return reshape(transpose(out), (w.shape[0], h, wd))


def normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """L2-normalise along the last axis."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def back(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _record("normalize_rows", out, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), back)


def softmax_channels(x) -> Tensor:
    """Per-pixel softmax over the leading channel axis of a ``C x H x W`` map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"softmax_channels expects C x H x W, got {x.shape}")
    return softmax(x, axis=0)


# ----------------------------------------------------------------------------
# spatial ops on channel-last maps (..., H, W, C)
# ----------------------------------------------------------------------------

def _correlate3x3(a: np.ndarray, weight: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    windows = sliding_window_view(np.pad(a, pad), (3, 3), axis=(-3, -2))
    return np.einsum("...hwcij,ijc->...hwc", windows, weight)


def depthwise3x3(x, weight: np.ndarray) -> Tensor:
    """Same-padded depthwise 3x3 conv with constant ``(3, 3, C)`` weights.

    Input is channel-last ``(..., H, W, C)``.  Gradient flows to ``x`` only;
    the kernel is frozen.
    """
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim < 3 or weight.shape != (3, 3, x.shape[-1]):
        raise DimensionError(f"depthwise3x3: input {x.shape} vs kernel {weight.shape}")
    flipped = weight[::-1, ::-1]
    return _record("depthwise3x3", _correlate3x3(x.data, weight), (x,),
                   lambda g: (_correlate3x3(g, flipped),))


def upsample_nearest(x, factor: int, axes: tuple[int, int]) -> Tensor:
    """Repeat each cell ``factor`` times along both spatial ``axes``."""
    x = as_tensor(x)
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=axes[0]), factor, axis=axes[1])

    def back(g):
        shape = list(g.shape)
        a0, a1 = sorted(axes)
        new = shape[:a0] + [shape[a0] // factor, factor] + shape[a0 + 1:a1] + \
            [shape[a1] // factor, factor] + shape[a1 + 1:]
        return (g.reshape(new).sum(axis=(a0 + 1, a1 + 2)),)

    return _record("upsample_nearest", out, (x,), back)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------

def _collect(loss: Tensor) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(i.node for i in node.inputs)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls until ``zero_grad``.  Returns the
    replayed tape (execution order); the graph itself is released.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward on a tensor with an empty tape")
    tape = Tape(_collect(loss))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    for node in tape.nodes:
        node.output.node = None
        node.inputs = ()
    return tape


def numeric_grad(f: Callable[[], float], param: Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central finite difference of ``f`` w.r.t. one entry of ``param``."""
    old = param.data[index]
    param.data[index] = old + step
    hi = f()
    param.data[index] = old - step
    lo = f()
    param.data[index] = old
    return (hi - lo) / (2 * step)


# ----------------------------------------------------------------------------
# TAPT tensor files
# ----------------------------------------------------------------------------

def encode_tapt(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = TAPT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tapt(buf: bytes) -> np.ndarray:
    from .errors import DataError

    if buf[:4] != TAPT_MAGIC:
        raise DataError("not a TAPT tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise DataError(f"TAPT payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path: str | Path, arr) -> None:
    if isinstance(arr, Tensor):
        arr = arr.data
    Path(path).write_bytes(encode_tapt(np.asarray(arr)))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tapt(Path(path).read_bytes())


def parameters_checksum(tensors: Iterable[tuple[str, Tensor]]) -> dict[str, str]:
    import hashlib

    return {name: hashlib.sha256(t.data.tobytes()).hexdigest() for name, t in tensors}
