"""Small reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the package (surrogate weights, process
parameters, phase angles, variational parameters) is carried by a
:class:`Tensor`.  Operations record their parents and a vector-Jacobian
product; :func:`backward` walks the resulting DAG once in reverse
topological order and accumulates gradients into the leaves.

The graph is consumed by a backward pass.  Calling :func:`backward` a second
time on the same output raises :class:`GraphError`; build a fresh graph
(i.e. recompute the forward pass) instead.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "tensor",
    "as_tensor",
    "backward",
    "grad",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d_same",
    "avgpool2x2",
    "leaky_relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "erf",
    "cos",
    "sin",
    "softplus",
    "softmax",
    "log_softmax",
    "tsum",
    "mean",
    "take",
    "reshape",
    "broadcast_to",
    "concat",
    "transpose",
    "DEFAULT_LEAKY_SLOPE",
]

DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    """Invalid use of the recorded graph (non-scalar output, reuse, ...)."""


class Tensor:
    """A dense float64 array with an optional gradient record."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_vjp", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _vjp=None, _op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self._op = _op
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(value, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor (always a copy)."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(value, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=parents, _vjp=vjp, _op=op)


def custom_op(value, parents: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Record an operation whose forward value was computed outside this module.

    ``vjp(g)`` receives the upstream gradient (shape of ``value``) and must
    return one array (or ``None``) per parent, each shaped like that parent.
    """
    parents = tuple(as_tensor(p) for p in parents)
    return _make(np.asarray(value, dtype=np.float64), parents, vjp, op)


# -- graph + backward ---------------------------------------------------

class Graph:
    """Topologically ordered record of the operations reachable from an output."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> list:
        order, seen = [], set()
        stack = [(output, False)]
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

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(output: Tensor) -> dict:
    """Back-propagate from a single-element tensor.

    Returns a mapping ``id(leaf) -> gradient`` and also accumulates into each
    grad-tracking leaf's ``.grad``.
    """
    if output.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output does not depend on any grad-tracking tensor")
    if output._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    graph = Graph(output)
    grads = {id(output): np.ones_like(output.value)}
    result = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[id(node)] = node.grad
            continue
        if node._vjp is None:
            raise GraphError(f"graph already consumed at op '{node._op}'")
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                raise ShapeError(f"backward({node._op})", pg.shape, p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in graph.nodes:
        if not node.is_leaf:
            node._vjp = None
            node._consumed = True
    return result


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of ``output`` with respect to the given leaves (fresh, not accumulated)."""
    for w in wrt:
        w.grad = None
    backward(output)
    return [np.zeros_like(w.value) if w.grad is None else w.grad for w in wrt]


# -- helpers --------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands at least 1-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        av, bv = a.value, b.value
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if av.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if bv.ndim == 1:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def conv2d_same(x, w, bias=None) -> Tensor:
    """Odd-kernel cross-correlation with zero padding keeping H, W.

    ``x``: (B, Cin, H, W); ``w``: (Cout, Cin, kh, kw); ``bias``: (Cout,).
    Evaluated directly in the spatial domain as kernel times patch matrix.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d_same", x.shape, w.shape)
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d_same", x.shape, w.shape)
    ph, pw = kh // 2, kw // 2
    B, C, H, W = x.shape
    cout = w.shape[0]
    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh, kw, H, W))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    cols = cols.reshape(B, C * kh * kw, H * W)
    wmat = w.value.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d_same", w.shape, bias.shape)
        out += bias.value[:, None]
        parents.append(bias)
    out = out.reshape(B, cout, H, W)

    def vjp(g):
        gx = gw = gb = None
        gf = g.reshape(B, cout, H * W)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gf).reshape(B, C, kh, kw, H, W)
            gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + H, j:j + W] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W].copy()
        if w.requires_grad:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gf.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, vjp, "conv2d_same")


def avgpool2x2(x) -> Tensor:
    """Non-overlapping 2x2 mean pooling over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError("avgpool2x2", x.shape)
    v = x.value
    out = 0.25 * (v[..., 0::2, 0::2] + v[..., 1::2, 0::2] + v[..., 0::2, 1::2] + v[..., 1::2, 1::2])

    def vjp(g):
        gx = np.empty_like(v)
        q = 0.25 * g
        gx[..., 0::2, 0::2] = q
        gx[..., 1::2, 0::2] = q
        gx[..., 0::2, 1::2] = q
        gx[..., 1::2, 1::2] = q
        return (gx,)

    return _make(out, (x,), vjp, "avgpool2x2")


# -- elementwise unary ----------------------------------------------------

def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= slope <= 1.0:
        raise ValueError("leaky_relu slope must lie in [0, 1]")
    out = np.maximum(x.value, slope * x.value)

    def vjp(g):
        scale = (x.value > 0) * (1.0 - slope)
        scale += slope
        return (g * scale,)

    return _make(out, (x,), vjp, "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def erf(x) -> Tensor:
    x = as_tensor(x)
    out = special.erf(x.value)
    dv = 2.0 / np.sqrt(np.pi) * np.exp(-x.value ** 2)
    return _make(out, (x,), lambda g: (g * dv,), "erf")


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),), "cos")


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),), "sin")


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated stably."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.value)
    return _make(out, (x,), lambda g: (g * special.expit(x.value),), "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = special.softmax(x.value, axis=axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = special.log_softmax(x.value, axis=axis)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax")


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.value.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), vjp, "mean")


def take(x, index) -> Tensor:
    """Basic or advanced indexing (slice)."""
    x = as_tensor(x)
    try:
        out = x.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice[{exc}]", x.shape) from None

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), (x,), vjp, "slice")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))

    return _make(out, parts, vjp, "concat")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("transpose", x.shape)
    return _make(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")
