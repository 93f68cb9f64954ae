"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a *primitive*: a forward function over
numpy arrays plus a vector-Jacobian product.  Primitives applied to tensors
that require gradients are recorded on the active :class:`Graph`; calling
:func:`backward` replays the tape in reverse.

Also holds the two optimizers used for training (plain SGD for the encoders,
Adam for the transfer probes) and a central-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""

    def __init__(self, primitive, shapes, detail=""):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{primitive}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised when a value crossing an op boundary is NaN or infinite."""


class GraphError(RuntimeError):
    pass


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A float64 array that can carry a gradient.

    ``argmax`` is only populated by :func:`max_over_axis` and holds the index
    selected for every output entry.
    """

    __slots__ = ("data", "requires_grad", "grad", "argmax", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError("tensor", [arr.shape], "empty extent")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.argmax = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.argmax = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return apply_primitive("mul", [other, self])

    def __truediv__(self, other):
        return apply_primitive("div", [self, other])

    def __rtruediv__(self, other):
        return apply_primitive("div", [other, self])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __getitem__(self, index):
        return apply_primitive("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)

    def transpose(self, *axes):
        return apply_primitive("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Graph / tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: list
    output: Tensor
    ctx: dict


class Graph:
    """Tape of primitive applications in the order they were executed."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._outputs: set[int] = set()

    def record(self, node):
        if self.consumed:
            # a new forward pass starts a fresh tape
            self.consumed = False
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def contains(self, tensor):
        return id(tensor) in self._outputs

    def reset(self):
        self.nodes = []
        self._outputs = set()

    def __enter__(self):
        _local_stack().append(self)
        return self

    def __exit__(self, *exc):
        _local_stack().pop()
        return False

    def backward(self, loss):
        return backward(self, loss)


_tls = threading.local()


def _local_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def current_graph():
    """The innermost active graph, falling back to a per-thread default."""
    stack = _local_stack()
    if stack:
        return stack[-1]
    default = getattr(_tls, "default", None)
    if default is None:
        default = _tls.default = Graph()
    return default


def _grad_enabled():
    return getattr(_tls, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording; outputs never require gradients inside the block."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(kind, arrays):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(kind, [a.shape for a in arrays]) from None


def _fw_add(a, b):
    _broadcast_shapes("add", (a, b))
    return a + b, None


def _bw_add(g, ctx, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fw_sub(a, b):
    _broadcast_shapes("sub", (a, b))
    return a - b, None


def _bw_sub(g, ctx, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _fw_mul(a, b):
    _broadcast_shapes("mul", (a, b))
    return a * b, None


def _bw_mul(g, ctx, a, b, out):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fw_div(a, b):
    _broadcast_shapes("div", (a, b))
    return a / b, None


def _bw_div(g, ctx, a, b, out):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _fw_neg(a):
    return -a, None


def _bw_neg(g, ctx, a, out):
    return (-g,)


def _fw_matmul(a, b):
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return a @ b, None


def _bw_matmul(g, ctx, a, b, out):
    if a.ndim == 1:
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.outer(a, g)
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _fw_tanh(a):
    return np.tanh(a), None


def _bw_tanh(g, ctx, a, out):
    return (g * (1.0 - out * out),)


def _fw_sigmoid(a):
    # split by sign to avoid overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out, None


def _bw_sigmoid(g, ctx, a, out):
    return (g * out * (1.0 - out),)


def _fw_relu(a):
    return np.maximum(a, 0.0), None


def _bw_relu(g, ctx, a, out):
    return (g * (a > 0),)


def _fw_exp(a):
    return np.exp(a), None


def _bw_exp(g, ctx, a, out):
    return (g * out,)


def _fw_log(a):
    return np.log(a), None


def _bw_log(g, ctx, a, out):
    return (g / a,)


def _fw_sqrt(a):
    return np.sqrt(a), None


def _bw_sqrt(g, ctx, a, out):
    return (g * 0.5 / out,)


def _fw_abs(a):
    return np.abs(a), None


def _bw_abs(g, ctx, a, out):
    return (g * np.sign(a),)


def _fw_abs_diff(a, b):
    if a.shape != b.shape:
        raise ShapeError("abs_diff", [a.shape, b.shape])
    return np.abs(a - b), None


def _bw_abs_diff(g, ctx, a, b, out):
    s = np.sign(a - b)
    return g * s, -g * s


def _masked_fill(a, mask, axis, fill):
    if mask is None:
        return a
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        m = np.broadcast_to(np.expand_dims(m, tuple(range(m.ndim, a.ndim))), a.shape)
    return np.where(m, a, fill)


def _fw_softmax(a, axis=-1, mask=None):
    z = _masked_fill(a, mask, axis, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True), {"axis": axis}


def _bw_softmax(g, ctx, a, out):
    axis = ctx["axis"]
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _fw_log_softmax(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return z - lse, {"axis": axis}


def _bw_log_softmax(g, ctx, a, out):
    axis = ctx["axis"]
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def _fw_sum(a, axis=None, keepdims=False):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims)), {"axis": axis, "keepdims": keepdims}


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _bw_sum(g, ctx, a, out):
    return (np.array(_expand_reduced(g, a.shape, ctx["axis"], ctx["keepdims"])),)


def _fw_mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return np.asarray(a.mean(axis=axis, keepdims=keepdims)), {"axis": axis, "keepdims": keepdims, "n": n}


def _bw_mean(g, ctx, a, out):
    return (_expand_reduced(g, a.shape, ctx["axis"], ctx["keepdims"]) / ctx["n"],)


def _fw_max(a, axis=0, mask=None):
    """Max over one axis; ties break toward the lowest index."""
    z = _masked_fill(a, mask, axis, -np.inf)
    if mask is not None and not np.all(np.any(np.isfinite(z), axis=axis)):
        raise ShapeError("max_over_axis", [a.shape], "mask leaves an empty slice")
    idx = np.argmax(z, axis=axis)
    out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return out, {"axis": axis, "idx": idx}


def _bw_max(g, ctx, a, out):
    axis, idx = ctx["axis"], ctx["idx"]
    ga = np.zeros_like(a)
    np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (ga,)


def _fw_concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [a.shape for a in arrays]) from None
    sizes = [a.shape[axis] for a in arrays]
    return out, {"axis": axis, "splits": np.cumsum(sizes)[:-1]}


def _bw_concat(g, ctx, *rest):
    return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


def _fw_stack(*arrays, axis=0):
    try:
        return np.stack(arrays, axis=axis), {"axis": axis}
    except ValueError:
        raise ShapeError("stack", [a.shape for a in arrays]) from None


def _bw_stack(g, ctx, *rest):
    axis = ctx["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(rest) - 1))


def _fw_getitem(a, index=None):
    return np.array(a[index]), {"index": index}


def _bw_getitem(g, ctx, a, out):
    ga = np.zeros_like(a)
    np.add.at(ga, ctx["index"], g)
    return (ga,)


def _fw_reshape(a, shape=None):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape]) from None


def _bw_reshape(g, ctx, a, out):
    return (g.reshape(a.shape),)


def _fw_transpose(a, axes=None):
    return np.transpose(a, axes), {"axes": axes}


def _bw_transpose(g, ctx, a, out):
    axes = ctx["axes"]
    inv = None if axes is None else np.argsort(axes)
    return (np.transpose(g, inv),)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable
    variadic: bool = False


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(_fw_add, _bw_add),
    "sub": Primitive(_fw_sub, _bw_sub),
    "mul": Primitive(_fw_mul, _bw_mul),
    "div": Primitive(_fw_div, _bw_div),
    "neg": Primitive(_fw_neg, _bw_neg),
    "matmul": Primitive(_fw_matmul, _bw_matmul),
    "tanh": Primitive(_fw_tanh, _bw_tanh),
    "sigmoid": Primitive(_fw_sigmoid, _bw_sigmoid),
    "relu": Primitive(_fw_relu, _bw_relu),
    "exp": Primitive(_fw_exp, _bw_exp),
    "log": Primitive(_fw_log, _bw_log),
    "sqrt": Primitive(_fw_sqrt, _bw_sqrt),
    "abs": Primitive(_fw_abs, _bw_abs),
    "abs_diff": Primitive(_fw_abs_diff, _bw_abs_diff),
    "softmax": Primitive(_fw_softmax, _bw_softmax),
    "log_softmax": Primitive(_fw_log_softmax, _bw_log_softmax),
    "sum": Primitive(_fw_sum, _bw_sum),
    "mean": Primitive(_fw_mean, _bw_mean),
    "max": Primitive(_fw_max, _bw_max),
    "concat": Primitive(_fw_concat, _bw_concat, variadic=True),
    "stack": Primitive(_fw_stack, _bw_stack, variadic=True),
    "getitem": Primitive(_fw_getitem, _bw_getitem),
    "reshape": Primitive(_fw_reshape, _bw_reshape),
    "transpose": Primitive(_fw_transpose, _bw_transpose),
}


def apply_primitive(kind, inputs, **attrs):
    """Run primitive ``kind`` on ``inputs`` and record it when differentiable."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    with np.errstate(all="ignore"):
        out, ctx = prim.forward(*arrays, **attrs)
    _check_finite(out, kind)
    needs_grad = _grad_enabled() and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(np.asarray(out, dtype=DTYPE), needs_grad)
    if kind == "max":
        result.argmax = ctx["idx"]
    if needs_grad:
        current_graph().record(Node(kind, tensors, result, ctx or {}))
    return result


def backward(graph, loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient.  The tape is consumed."""
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be scalar")
    if graph.consumed:
        raise GraphError("backward called twice without a new forward pass")
    if not graph.contains(loss):
        raise GraphError("loss was not produced on this graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        arrays = [t.data for t in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = prim.vjp(g, node.ctx, *arrays, node.output.data)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if graph.contains(t):
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=DTYPE) if t.grad is None else t.grad + gi
    graph.reset()
    graph.consumed = True


# functional spellings ------------------------------------------------------


def add(a, b):
    return apply_primitive("add", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def relu(x):
    return apply_primitive("relu", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def abs_diff(a, b):
    return apply_primitive("abs_diff", [a, b])


def softmax(x, axis=-1, mask=None):
    return apply_primitive("softmax", [x], axis=axis, mask=mask)


def log_softmax(x, axis=-1):
    return apply_primitive("log_softmax", [x], axis=axis)


def concat(tensors, axis=0):
    return apply_primitive("concat", list(tensors), axis=axis)


def stack(tensors, axis=0):
    return apply_primitive("stack", list(tensors), axis=axis)


def max_over_axis(x, axis=0, mask=None):
    """Per-slice maximum.  ``out.argmax`` holds the winning indices."""
    return apply_primitive("max", [x], axis=axis, mask=mask)


def mean_over_axis(x, axis=0):
    return apply_primitive("mean", [x], axis=axis)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, eps=1e-4):
    """Max relative error between backprop and central differences.

    ``f`` maps nothing to a scalar Tensor and must read ``params`` (a list of
    leaf tensors) from its closure.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Graph() as g:
        loss = f()
        backward(g, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    return _compare(f, params, analytic, eps)


def _eval_scalar(f):
    with no_grad():
        try:
            val = f()
        except NonFiniteError as exc:
            raise NonFiniteError(f"perturbed evaluation not finite: {exc}") from None
    return float(val.data.reshape(-1)[0])


def _compare(f, params, analytic, eps):
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _eval_scalar(f)
            flat[i] = orig - eps
            down = _eval_scalar(f)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


def grad_check_with(f, params, analytic, eps=1e-4):
    """Like :func:`grad_check` but compares against caller-supplied gradients."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    return _compare(f, list(params), [np.asarray(a, dtype=DTYPE) for a in analytic], eps)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    epoch_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.epoch_decay <= 1:
            raise ValueError("epoch_decay must lie in (0, 1]")

    def end_epoch(self):
        self.lr *= self.epoch_decay


def _grads_of(params, grads):
    if grads is None:
        grads = [p.grad for p in params]
    out = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.data.shape:
            raise ShapeError("optimizer step", [p.data.shape, g.shape])
        out.append(g)
    if len(out) != len(params):
        raise ShapeError("optimizer step", [(len(params),), (len(out),)], "param/grad count")
    return out


def sgd_step(params: Sequence[Tensor], grads, state: OptimizerState):
    """p <- p - lr * g, in place."""
    for p, g in zip(params, _grads_of(params, grads)):
        p.data -= state.lr * g
    return params


_MAX_STEP = 2**62


def adam_step(params: Sequence[Tensor], grads, state: OptimizerState):
    """Bias-corrected Adam update, in place.  Moments are keyed by position."""
    gs = _grads_of(params, grads)
    if state.step >= _MAX_STEP:
        raise OverflowError("Adam step counter overflow")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, gs)):
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def clip_grad_norm(params, max_norm):
    """Rescale accumulated ``.grad`` buffers so their global L2 norm is at
    most ``max_norm``.  Returns the norm before clipping."""
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def zero_grads(params):
    for p in params:
        p.grad = None
