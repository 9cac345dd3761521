"""Minimal reverse-mode autodiff substrate on dense numpy arrays.

Tensors are thin wrappers over C-contiguous numpy arrays (row-major).
Operators are applied through :func:`forward_op`, which dispatches on an
operator id, validates shapes, rejects non-finite outputs, and appends a
node to the active :class:`Tape` whenever any input requires gradients.
:func:`backward` runs reverse-mode accumulation over the tape.

Double precision is the default dtype; single precision is accepted for
training loops but every gradient/oracle test runs in float64.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# Large negative finite fill for attention masking. exp(x - max) underflows
# to exactly 0.0 for this magnitude, so masked positions get weight 0 while
# every tensor stays finite.
NEG_FILL = -1e30


class NumericsError(Exception):
    """Base class for substrate failures."""


class ShapeError(NumericsError):
    def __init__(self, op: str, message: str, shapes: Sequence[tuple] = ()):
        detail = f"{op}: {message}"
        if shapes:
            detail += f" (shapes: {[tuple(s) for s in shapes]})"
        super().__init__(detail)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(NumericsError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class UnknownOperatorError(NumericsError):
    pass


class NonScalarLossError(NumericsError):
    pass


class NondeterministicFunctionError(NumericsError):
    pass


class CheckpointError(NumericsError):
    pass


class Tensor:
    """Dense real array with row-major layout and an optional grad flag."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data)
        if arr.dtype == np.float16:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None,
           dtype=np.float64) -> Tensor:
    """Build a tensor, casting floating input to the requested precision.

    Integer and boolean input keeps its kind (ids and masks carry no grad).
    """
    arr = np.asarray(data)
    if dtype is not None and np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


class Node:
    """One recorded operator application."""

    __slots__ = ("op", "attrs", "inputs", "output", "saved")

    def __init__(self, op: str, attrs: dict, inputs: tuple, output: Tensor, saved):
        self.op = op
        self.attrs = attrs
        self.inputs = inputs
        self.output = output
        self.saved = saved


class Tape:
    """Computation record: topologically ordered operator applications.

    Replaying the record re-executes every forward rule in order and
    reproduces the recorded outputs bit-identically given identical inputs.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> list[np.ndarray]:
        """Re-execute all nodes; returns recomputed output arrays in order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            in_data = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = _OPS[node.op].forward(in_data, node.attrs)
            values[id(node.output)] = out
            outs.append(out)
        return outs


_STATE = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
    return _STATE.tapes


class record:
    """Context manager activating a fresh tape for gradient recording."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self) -> Tape:
        _tape_stack().append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _OpDef:
    __slots__ = ("forward", "backward")

    def __init__(self, forward: Callable, backward: Callable):
        self.forward = forward
        self.backward = backward


_OPS: dict[str, _OpDef] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    _OPS[name] = _OpDef(forward, backward)


def forward_op(name: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply operator `name` to `inputs`.

    Shape rules are documented on the per-operator helpers below. The output
    is appended to the active tape when any input requires gradients.
    Non-finite outputs and shape mismatches are rejected.
    """
    if name not in _OPS:
        raise UnknownOperatorError(f"unknown operator: {name}")
    attrs = attrs or {}
    in_data = [t.data for t in inputs]
    out, saved = _OPS[name].forward(in_data, attrs)
    if np.issubdtype(out.dtype, np.floating) and not np.isfinite(out).all():
        raise NonFiniteError(name)
    requires = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.append(Node(name, attrs, tuple(inputs), result, saved))
    return result


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None,
             tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation from a scalar loss.

    Returns a map (keyed by tensor identity) from parameter to gradient
    array, covering every requires_grad tensor touched on the tape, or
    exactly the tensors in `wrt` with zeros for unreachable ones.
    Raises for a non-scalar loss.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None:
        raise NumericsError("backward called with no active or supplied tape")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(node.output, None)
        if gout is None:
            continue
        in_grads = _OPS[node.op].backward(gout, node)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(t)
            grads[t] = g if acc is None else acc + g
    if wrt is None:
        return grads
    return {t: grads.get(t, np.zeros_like(t.data)) for t in wrt}


# ---------------------------------------------------------------------------
# operator rules
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands not broadcastable", [a.shape, b.shape])


def _fwd_add(inp, attrs):
    a, b = inp
    _check_broadcast("add", a, b)
    return a + b, None


def _bwd_add(g, node):
    a, b = (t.data for t in node.inputs)
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fwd_sub(inp, attrs):
    a, b = inp
    _check_broadcast("sub", a, b)
    return a - b, None


def _bwd_sub(g, node):
    a, b = (t.data for t in node.inputs)
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _fwd_mul(inp, attrs):
    a, b = inp
    _check_broadcast("mul", a, b)
    return a * b, None


def _bwd_mul(g, node):
    a, b = (t.data for t in node.inputs)
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fwd_scale(inp, attrs):
    return inp[0] * attrs["value"], None


def _bwd_scale(g, node):
    return [g * node.attrs["value"]]


def _fwd_matmul(inp, attrs):
    a, b = inp
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D", [a.shape, b.shape])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner dimensions differ", [a.shape, b.shape])
    return np.matmul(a, b), None


def _bwd_matmul(g, node):
    a, b = (t.data for t in node.inputs)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _fwd_relu(inp, attrs):
    return np.maximum(inp[0], 0.0), None


def _bwd_relu(g, node):
    return [g * (node.inputs[0].data > 0)]


def _fwd_sigmoid(inp, attrs):
    x = inp[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def _bwd_sigmoid(g, node):
    s = node.saved
    return [g * s * (1.0 - s)]


def _fwd_swish(inp, attrs):
    x = inp[0]
    s, _ = _fwd_sigmoid([x], None)
    return x * s, s


def _bwd_swish(g, node):
    x = node.inputs[0].data
    s = node.saved
    return [g * (s + x * s * (1.0 - s))]


def _fwd_tanh(inp, attrs):
    out = np.tanh(inp[0])
    return out, out


def _bwd_tanh(g, node):
    t = node.saved
    return [g * (1.0 - t * t)]


def _fwd_exp(inp, attrs):
    out = np.exp(inp[0])
    return out, out


def _bwd_exp(g, node):
    return [g * node.saved]


def _fwd_log(inp, attrs):
    return np.log(inp[0]), None


def _bwd_log(g, node):
    return [g / node.inputs[0].data]


def _fwd_glu(inp, attrs):
    x = inp[0]
    axis = attrs.get("axis", -1)
    if x.shape[axis] % 2 != 0:
        raise ShapeError("glu", f"axis {axis} size must be even", [x.shape])
    a, b = np.split(x, 2, axis=axis)
    s, _ = _fwd_sigmoid([b], None)
    return a * s, (a, s)


def _bwd_glu(g, node):
    a, s = node.saved
    axis = node.attrs.get("axis", -1)
    ga = g * s
    gb = g * a * s * (1.0 - s)
    return [np.concatenate([ga, gb], axis=axis)]


def _fwd_softmax(inp, attrs):
    x = inp[0]
    axis = attrs.get("axis", -1)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


def _bwd_softmax(g, node):
    s = node.saved
    axis = node.attrs.get("axis", -1)
    dot = (g * s).sum(axis=axis, keepdims=True)
    return [s * (g - dot)]


def _fwd_log_softmax(inp, attrs):
    x = inp[0]
    axis = attrs.get("axis", -1)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return out, out


def _bwd_log_softmax(g, node):
    ls = node.saved
    axis = node.attrs.get("axis", -1)
    return [g - np.exp(ls) * g.sum(axis=axis, keepdims=True)]


def _fwd_layer_norm(inp, attrs):
    x, scale, shift = inp
    eps = attrs.get("eps", 1e-5)
    if scale.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", "scale/shift must match last axis",
                         [x.shape, scale.shape, shift.shape])
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * scale + shift, (xhat, inv)


def _bwd_layer_norm(g, node):
    x, scale, _ = (t.data for t in node.inputs)
    xhat, inv = node.saved
    n = x.shape[-1]
    gxhat = g * scale
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(g.ndim - 1))
    gscale = (g * xhat).sum(axis=axes) if axes else (g * xhat)
    gshift = g.sum(axis=axes) if axes else g
    return [gx, gscale.reshape(scale.shape), gshift.reshape(scale.shape)]


def _fwd_depthwise_conv1d(inp, attrs):
    # x: (..., T, C), w: (k, C), bias: (C). Same padding, output (..., T, C).
    x, w, b = inp
    k, c = w.shape
    if x.shape[-1] != c or b.shape != (c,):
        raise ShapeError("depthwise_conv1d", "channel mismatch", [x.shape, w.shape, b.shape])
    left = (k - 1) // 2
    right = k - 1 - left
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x, pad)
    t = x.shape[-2]
    out = np.zeros_like(x)
    for j in range(k):
        out += xp[..., j:j + t, :] * w[j]
    return out + b, (xp, left, right)


def _bwd_depthwise_conv1d(g, node):
    x, w, _ = (t.data for t in node.inputs)
    xp, left, right = node.saved
    k = w.shape[0]
    t = x.shape[-2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    lead = tuple(range(g.ndim - 2))
    for j in range(k):
        gxp[..., j:j + t, :] += g * w[j]
        gw[j] = (xp[..., j:j + t, :] * g).sum(axis=lead + (-2,))
    gx = gxp[..., left:left + t, :] if (left or right) else gxp
    gb = g.sum(axis=lead + (-2,))
    return [gx, gw, gb]


def _fwd_strided_conv1d(inp, attrs):
    # x: (..., T, Cin), w: (k, Cin, Cout), bias: (Cout), stride s.
    # Right-pads with zeros so T_out = ceil(T / s); frame i covers x[i*s : i*s+k].
    x, w, b = inp
    stride = attrs["stride"]
    k, cin, cout = w.shape
    if x.shape[-1] != cin or b.shape != (cout,):
        raise ShapeError("strided_conv1d", "channel mismatch", [x.shape, w.shape, b.shape])
    t = x.shape[-2]
    if t < 1:
        raise ShapeError("strided_conv1d", "need at least one frame", [x.shape])
    t_out = -(-t // stride)
    t_pad = (t_out - 1) * stride + k
    pad = [(0, 0)] * (x.ndim - 2) + [(0, t_pad - t), (0, 0)]
    xp = np.pad(x, pad)
    frames = np.stack([xp[..., i * stride:i * stride + k, :] for i in range(t_out)], axis=-3)
    flat = frames.reshape(frames.shape[:-2] + (k * cin,))
    out = np.matmul(flat, w.reshape(k * cin, cout)) + b
    return out, (flat, t_pad)


def _bwd_strided_conv1d(g, node):
    x, w, _ = (t.data for t in node.inputs)
    flat, t_pad = node.saved
    stride = node.attrs["stride"]
    k, cin, cout = w.shape
    t = x.shape[-2]
    t_out = g.shape[-2]
    gflat = np.matmul(g, w.reshape(k * cin, cout).T)
    gframes = gflat.reshape(gflat.shape[:-1] + (k, cin))
    gxp = np.zeros(x.shape[:-2] + (t_pad, cin), dtype=x.dtype)
    for i in range(t_out):
        gxp[..., i * stride:i * stride + k, :] += gframes[..., i, :, :]
    lead = tuple(range(g.ndim - 1))
    gw = np.tensordot(flat, g, axes=(lead, lead)).reshape(k, cin, cout)
    gb = g.sum(axis=lead)
    return [gxp[..., :t, :], gw, gb]


def _fwd_embedding(inp, attrs):
    table, ids = inp
    if table.ndim != 2:
        raise ShapeError("embedding", "table must be 2-D", [table.shape])
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", "ids must be integral", [ids.shape])
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for table of {table.shape[0]} rows")
    return table[ids], None


def _bwd_embedding(g, node):
    table, ids = (t.data for t in node.inputs)
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return [gt, None]


def _fwd_concat(inp, attrs):
    axis = attrs.get("axis", -1)
    if not inp:
        raise ShapeError("concat", "needs at least one input")
    return np.concatenate(inp, axis=axis), [a.shape[axis] for a in inp]


def _bwd_concat(g, node):
    axis = node.attrs.get("axis", -1)
    sizes = node.saved
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _fwd_masked_fill(inp, attrs):
    x, mask = inp
    _check_broadcast("masked_fill", x, mask)
    if mask.dtype != np.bool_:
        raise ShapeError("masked_fill", "mask must be boolean", [mask.shape])
    return np.where(mask, attrs["value"], x), None


def _bwd_masked_fill(g, node):
    x, mask = (t.data for t in node.inputs)
    return [_unbroadcast(np.where(mask, 0.0, g), x.shape), None]


def _norm_axis(attrs):
    axis = attrs.get("axis")
    if axis is None:
        return None
    return tuple(axis) if isinstance(axis, (list, tuple)) else (axis,)


def _fwd_reduce_sum(inp, attrs):
    axis = _norm_axis(attrs)
    return inp[0].sum(axis=axis, keepdims=attrs.get("keepdims", False)), None


def _bwd_reduce_sum(g, node):
    x = node.inputs[0].data
    axis = _norm_axis(node.attrs)
    if axis is not None and not node.attrs.get("keepdims", False):
        g = np.expand_dims(g, axis=axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _fwd_reduce_mean(inp, attrs):
    axis = _norm_axis(attrs)
    return inp[0].mean(axis=axis, keepdims=attrs.get("keepdims", False)), None


def _bwd_reduce_mean(g, node):
    x = node.inputs[0].data
    axis = _norm_axis(node.attrs)
    if axis is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in axis]))
    if axis is not None and not node.attrs.get("keepdims", False):
        g = np.expand_dims(g, axis=axis)
    return [np.broadcast_to(g, x.shape).copy() / n]


def _fwd_reshape(inp, attrs):
    x = inp[0]
    shape = tuple(attrs["shape"])
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {shape}", [x.shape])


def _bwd_reshape(g, node):
    return [g.reshape(node.inputs[0].shape)]


def _fwd_transpose(inp, attrs):
    axes = tuple(attrs["axes"])
    x = inp[0]
    if len(axes) != x.ndim:
        raise ShapeError("transpose", f"axes {axes} do not match rank", [x.shape])
    return np.ascontiguousarray(x.transpose(axes)), None


def _bwd_transpose(g, node):
    axes = tuple(node.attrs["axes"])
    inverse = np.argsort(axes)
    return [np.ascontiguousarray(g.transpose(inverse))]


for _name, _f, _b in [
    ("add", _fwd_add, _bwd_add),
    ("sub", _fwd_sub, _bwd_sub),
    ("mul", _fwd_mul, _bwd_mul),
    ("scale", _fwd_scale, _bwd_scale),
    ("matmul", _fwd_matmul, _bwd_matmul),
    ("relu", _fwd_relu, _bwd_relu),
    ("sigmoid", _fwd_sigmoid, _bwd_sigmoid),
    ("swish", _fwd_swish, _bwd_swish),
    ("tanh", _fwd_tanh, _bwd_tanh),
    ("exp", _fwd_exp, _bwd_exp),
    ("log", _fwd_log, _bwd_log),
    ("glu", _fwd_glu, _bwd_glu),
    ("softmax", _fwd_softmax, _bwd_softmax),
    ("log_softmax", _fwd_log_softmax, _bwd_log_softmax),
    ("layer_norm", _fwd_layer_norm, _bwd_layer_norm),
    ("depthwise_conv1d", _fwd_depthwise_conv1d, _bwd_depthwise_conv1d),
    ("strided_conv1d", _fwd_strided_conv1d, _bwd_strided_conv1d),
    ("embedding", _fwd_embedding, _bwd_embedding),
    ("concat", _fwd_concat, _bwd_concat),
    ("masked_fill", _fwd_masked_fill, _bwd_masked_fill),
    ("reduce_sum", _fwd_reduce_sum, _bwd_reduce_sum),
    ("reduce_mean", _fwd_reduce_mean, _bwd_reduce_mean),
    ("reshape", _fwd_reshape, _bwd_reshape),
    ("transpose", _fwd_transpose, _bwd_transpose),
]:
    _register(_name, _f, _b)


def operator_ids() -> list[str]:
    return sorted(_OPS.keys())


def register_operator(name: str, forward: Callable, backward: Callable) -> None:
    """Extension point for composite operators with hand-derived gradients."""
    _register(name, forward, backward)


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def add(a, b): return forward_op("add", [a, b])
def sub(a, b): return forward_op("sub", [a, b])
def mul(a, b): return forward_op("mul", [a, b])
def scale(a, value): return forward_op("scale", [a], {"value": float(value)})
def matmul(a, b): return forward_op("matmul", [a, b])
def relu(x): return forward_op("relu", [x])
def sigmoid(x): return forward_op("sigmoid", [x])
def swish(x): return forward_op("swish", [x])
def tanh(x): return forward_op("tanh", [x])
def exp(x): return forward_op("exp", [x])
def log(x): return forward_op("log", [x])
def glu(x, axis=-1): return forward_op("glu", [x], {"axis": axis})
def softmax(x, axis=-1): return forward_op("softmax", [x], {"axis": axis})
def log_softmax(x, axis=-1): return forward_op("log_softmax", [x], {"axis": axis})


def layer_norm(x, scale_t, shift_t, eps=1e-5):
    return forward_op("layer_norm", [x, scale_t, shift_t], {"eps": eps})


def depthwise_conv1d(x, w, b):
    return forward_op("depthwise_conv1d", [x, w, b])


def strided_conv1d(x, w, b, stride):
    return forward_op("strided_conv1d", [x, w, b], {"stride": int(stride)})


def embedding(table, ids):
    return forward_op("embedding", [table, ids])


def concat(tensors, axis=-1):
    return forward_op("concat", list(tensors), {"axis": axis})


def masked_fill(x, mask, value):
    return forward_op("masked_fill", [x, mask], {"value": float(value)})


def reduce_sum(x, axis=None, keepdims=False):
    return forward_op("reduce_sum", [x], {"axis": axis, "keepdims": keepdims})


def reduce_mean(x, axis=None, keepdims=False):
    return forward_op("reduce_mean", [x], {"axis": axis, "keepdims": keepdims})


def reshape(x, shape):
    return forward_op("reshape", [x], {"shape": tuple(int(s) for s in shape)})


def transpose(x, axes):
    return forward_op("transpose", [x], {"axes": tuple(int(a) for a in axes)})


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 dtype=np.float64) -> np.ndarray:
    """Seeded uniform initialization in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_err: float, passed: bool, tol: float):
        self.max_rel_err = max_rel_err
        self.passed = passed
        self.tol = tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, {status} at tol={self.tol:g})"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    Rejects non-deterministic f (two evaluations must agree bitwise) and
    eps outside (0, 1e-2]. Relative error per element is
    |a - b| / max(|a|, |b|, 1e-8).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with record() as tape:
        y1 = f(probe)
    if y1.data.ndim != 0 and y1.data.size != 1:
        raise NonScalarLossError("grad_check requires a scalar-valued function")
    with record():  # isolate probe evaluations from any outer tape
        y2 = f(Tensor(x.data.copy(), requires_grad=False))
    if not np.array_equal(y1.data, y2.data):
        raise NondeterministicFunctionError("two evaluations of f differ")
    analytic = backward(y1, wrt=[probe], tape=tape)[probe]

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.copy()
    indices = list(np.ndindex(*flat.shape)) if flat.ndim else [()]
    for idx in indices:
        orig = flat[idx]
        with record():
            flat[idx] = orig + eps
            hi = float(f(Tensor(flat.copy())).data)
            flat[idx] = orig - eps
            lo = float(f(Tensor(flat.copy())).data)
        flat[idx] = orig
        numeric[idx] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0
    return GradCheckReport(max_rel, max_rel <= tol, tol)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"HECKPT01"
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write parameters to a little-endian binary container.

    Layout: 8-byte magic, u32 entry count, then per entry: u32 name length,
    UTF-8 name, u8 dtype code (0=f64, 1=f32, 2=i64), u32 ndim, u32 dims,
    raw row-major data. Round-trips bit-exactly.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            dtype = np.dtype(arr.dtype)
            if dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {dtype} for parameter {name}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_CODES[dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr).astype(dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a parameter container written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (code,) = struct.unpack("<B", fh.read(1))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            dtype = _CODE_DTYPES[code]
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        return out
