"""A small dense-tensor reverse-mode autodiff engine on float64 numpy arrays.

Each differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  ``backward`` walks the recorded graph in reverse order; when a
:class:`Tape` is active the order is the literal recording order, otherwise a
topological sort from the loss is used.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

MASK_FILL = -9e15
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """A gradient contract was violated (non-scalar loss, missing grad)."""


_active_tapes: list["Tape"] = []
_grad_enabled = [True]


class no_grad:
    """Context manager: ops inside build no graph (inference only)."""

    def __enter__(self):
        _grad_enabled.append(False)

    def __exit__(self, *exc):
        _grad_enabled.pop()
        return False


class Tape:
    """Ordered record of operation nodes.

    Use as a context manager; every op executed inside the block is appended
    in execution order, which is a valid topological order for replay.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- array-like views -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.reshape(-1)

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, tape=None):
        backward(self, tape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    out._parents = parents
    out._backward = backward_fn if out.requires_grad else None
    out.op = op
    if out.requires_grad:
        for tape in _active_tapes:
            tape.record(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def abs_(x):
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,), "abs")


def exp(x):
    x = as_tensor(x)
    out = np.exp(np.minimum(x.data, 700.0))
    return _node(out, (x,), lambda g: (g * out,), "exp")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope=LEAKY_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.data >= 0, 1.0, slope)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def moveaxis(x, source, destination):
    axes = list(range(as_tensor(x).ndim))
    axes.insert(destination % len(axes), axes.pop(source % len(axes)))
    return transpose(x, tuple(axes))


def getitem(x, index):
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(x.data[index]), (x,), back, "getitem")


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat along axis {axis}: {x.shape} incompatible with {ref}")
    offsets = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _node(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), back, "concat")


def masked_fill(x, mask, fill=MASK_FILL):
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not fit tensor {x.shape}") from None
    keep = ~mask
    return _node(np.where(mask, fill, x.data), (x,), lambda g: (g * keep,), "masked_fill")


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def back(g):
        # a shared 2-D operand gets its gradient from one flattened GEMM
        # instead of a batch of products reduced afterwards
        if a.ndim == 2 and b.ndim > 2:
            ga = _flat_outer(g, b.data)
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), back, "matmul")


def _flat_outer(g, b):
    """sum over batch of g_i @ b_i^T for g (..., M, P), b (..., K, P)."""
    gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
    bm = np.moveaxis(np.broadcast_to(b, g.shape[:-2] + b.shape[-2:]), -2, 0).reshape(b.shape[-2], -1)
    return gm @ bm.T


def einsum(subscripts, a, b):
    """Two-operand einsum, e.g. ``einsum("oc,bnct->bnot", w, x)``.

    Restricted to subscripts where no index repeats inside one operand and
    every input index appears in the other operand or the output.
    """
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ShapeError(f"repeated index inside an operand: {subscripts}")
    data = np.einsum(subscripts, a.data, b.data, optimize=True)

    def back(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _node(data, (a, b), back, "einsum")


def softmax_lastdim(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def dilated_causal_conv1d(x, w, dilation=1):
    """Causal conv over the last axis; x is (..., C_in, T), w is (C_out, C_in, K).

    ``out[..., c, t] = sum_{i,k} w[c, i, k] * x[..., i, t - k*dilation]`` with
    zero left padding, so the output keeps length T.
    """
    x, w = as_tensor(x), as_tensor(w)
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise ShapeError(f"conv input {x.shape} does not match kernel {w.shape}")
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x.data.reshape((-1,) + x.shape[-2:]))
    wd = np.ascontiguousarray(w.data)
    out = kernels.causal_conv_forward(flat, wd, dilation)

    def back(g):
        g = np.ascontiguousarray(g.reshape((-1,) + g.shape[-2:]))
        gx, gw = kernels.causal_conv_backward(g, flat, wd, dilation)
        return gx.reshape(x.shape), gw

    return _node(out.reshape(lead + out.shape[-2:]), (x, w), back, "conv1d")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so call
    ``zero_grad`` between independent passes.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    if tape is not None:
        order = list(tape.nodes)
        if not any(node is loss for node in reversed(order)):
            raise GradientError("loss was not recorded on the given tape")
    else:
        order = _topological(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._backward is None:
                # leaf: accumulate straight into .grad
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


@dataclass(frozen=True)
class GradientCheck:
    max_rel: float  # worst relative gap over coordinates above the floor
    max_abs: float  # worst absolute gap over all checked coordinates
    checked: int
    floored: int  # coordinates whose absolute gap was below ``atol``


def gradient_check_stats(f, x, h=1e-5, atol=1e-9, coords=None):
    """Compare analytic and central-difference gradients of scalar ``f`` at ``x``.

    Per coordinate the relative gap is ``|a - c| / (|a| + |c| + 1e-12)``.
    Coordinates whose absolute gap is at most ``atol`` (the finite-difference
    rounding floor) are counted in ``floored`` and score zero.
    """
    x = as_tensor(x)
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = worst_abs = 0.0
    checked = floored = 0
    for i in idx:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        gap = abs(analytic[i] - numeric)
        checked += 1
        worst_abs = max(worst_abs, gap)
        if gap <= atol:
            floored += 1
            continue
        worst = max(worst, gap / (abs(analytic[i]) + abs(numeric) + 1e-12))
    return GradientCheck(worst, worst_abs, checked, floored)


def gradient_check(f, x, h=1e-5, atol=1e-9, coords=None):
    """Largest relative analytic-vs-numeric gradient gap (see ``gradient_check_stats``)."""
    return gradient_check_stats(f, x, h, atol, coords).max_rel


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments kept per parameter name."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "mpgat-checkpoint"
CHECKPOINT_VERSION = 1


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(entry):
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])


def save_params(path, params, header=None):
    """Write named parameters as little-endian float64 blobs in a JSON manifest."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "params": {name: encode_array(as_tensor(p).data) for name, p in params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_params(path):
    """Return ``(params, header)`` with params as requires_grad Tensors."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {k: Tensor(decode_array(v), requires_grad=True) for k, v in doc["params"].items()}
    return params, doc.get("header", {})
