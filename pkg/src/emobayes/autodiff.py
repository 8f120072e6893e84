"""Reverse-mode automatic differentiation over dense float64 arrays.

Small tape-based engine in the micrograd style, scaled up to numpy
ndarrays. Every primitive records a backward closure on its output
node; ``backward`` on a scalar loss runs the tape in reverse
topological order and accumulates gradients into the ``grad`` field of
the leaves that were created with ``requires_grad=True``.

Conventions baked into the primitives:
  * all data is float64; inputs are coerced on construction,
  * ``conv1d`` uses "same" zero padding with stride 1,
  * ``maxpool1d`` breaks ties toward the lowest index,
  * relu defines subgradient 0 at the kink,
  * stochastic masks (dropout) are drawn *outside* the graph and enter
    through ``dropout_mask_apply``, so replaying a forward pass with
    the same seed is bit-identical.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "apply",
    "backward",
    "gradcheck",
    "no_grad",
    "supported_ops",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv1d",
    "maxpool1d",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "mean",
    "variance",
    "tsum",
    "tslice",
    "concat",
    "dropout_mask_apply",
    "reshape",
    "transpose",
]


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    """Input shapes are invalid for the requested op."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf; carries the op tag and node index."""

    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"non-finite values in output of op '{op}' (node {node_id})")


class GraphError(AutodiffError):
    """Backward misuse: non-scalar loss or an already-freed graph."""


_node_counter = itertools.count()

# When False, ops skip graph recording entirely (inference fast path).
_grad_enabled = True

# Finite-value checking of every op output. Cheap relative to the
# matmuls at the sizes this library targets, so it stays on by default.
finite_checks = True

_FREED = "freed"


class no_grad:
    """Context manager disabling graph recording inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array participating in the differentiation graph.

    Leaves are created directly (optionally with ``requires_grad``);
    interior nodes are created by the primitives below and carry a
    backward closure plus references to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if finite_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf", next(_node_counter))
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.node_id = next(_node_counter)
        self._parents: tuple = ()
        self._backward: object = None

    # -- construction of op outputs -------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out.node_id = next(_node_counter)
        if finite_checks and not np.all(np.isfinite(data)):
            raise NonFiniteError(op, out.node_id)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return tslice(self, key)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return Tensor._from_op(data, "add", (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return Tensor._from_op(data, "sub", (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return Tensor._from_op(data, "mul", (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return Tensor._from_op(data, "div", (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor._from_op(data, "matmul", (a, b), backward_fn)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """1-D convolution, "same" zero padding, stride 1.

    ``x`` has shape (batch, length, c_in) and ``w`` (c_out, c_in, k);
    output is (batch, length, c_out). For even k the padding is split
    as left=(k-1)//2, right=k//2. Bias, when wanted, is a separate add.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects x (B,L,Cin) and w (Cout,Cin,K), got {x.data.shape}, {w.data.shape}")
    batch, length, c_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    pad_l = (k - 1) // 2
    xp = np.zeros((batch, length + k - 1, c_in))
    xp[:, pad_l:pad_l + length, :] = x.data
    # im2col: one GEMM instead of k strided ones.
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, L, C, k)
    cols = np.ascontiguousarray(windows).reshape(batch * length, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out = np.matmul(cols, w2.T).reshape(batch, length, c_out)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g).reshape(batch * length, c_out)
        gw = np.matmul(g2.T, cols).reshape(c_out, c_in, k)
        gcols = np.matmul(g2, w2).reshape(batch, length, c_in, k)
        gxp = np.zeros_like(xp)
        for tap in range(k):
            gxp[:, tap:tap + length, :] += gcols[:, :, :, tap]
        return gxp[:, pad_l:pad_l + length, :], gw

    return Tensor._from_op(out, "conv1d", (x, w), backward_fn)


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling along the length axis of (B,L,C).

    Length must divide evenly by ``window``; ties go to the lowest
    index inside the window so replay is deterministic.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool1d expects (B,L,C), got {x.data.shape}")
    batch, length, ch = x.data.shape
    if window < 1 or length % window != 0:
        raise ShapeError(f"maxpool1d window {window} does not divide length {length}")
    blocks = x.data.reshape(batch, length // window, window, ch)
    idx = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward_fn(g):
        gx = np.zeros_like(blocks)
        np.put_along_axis(gx, idx[:, :, None, :], g[:, :, None, :], axis=2)
        return (gx.reshape(batch, length, ch),)

    return Tensor._from_op(out, "maxpool1d", (x,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._from_op(out, "relu", (x,), lambda g: (g * (x.data > 0.0),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), using the x + log1p(exp(-x)) branch for x > 0."""
    d = x.data
    out = np.where(d > 0, d + np.log1p(np.exp(-np.abs(d))), np.log1p(np.exp(np.minimum(d, 0.0))))

    def backward_fn(g):
        pos = d >= 0
        s = np.empty_like(d)
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ex = np.exp(d[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Tensor._from_op(out, "softplus", (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(x.data)
    return Tensor._from_op(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._from_op(out, "log", (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return Tensor._from_op(out, "square", (x,), lambda g: (g * 2.0 * x.data,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return Tensor._from_op(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else x.data.shape[axis]

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / n,)

    return Tensor._from_op(np.asarray(out), "mean", (x,), backward_fn)


def tsum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (x,), backward_fn)


def variance(x: Tensor, axis: Optional[int] = None, ddof: int = 0, keepdims: bool = False) -> Tensor:
    """Variance with selectable ddof (0 = population, 1 = unbiased)."""
    n = x.data.size if axis is None else x.data.shape[axis]
    if n - ddof < 1:
        raise ShapeError(f"variance over {n} elements with ddof={ddof} is undefined")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    out = np.asarray((centered * centered).sum(axis=axis, keepdims=keepdims) / (n - ddof))

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * centered * g / (n - ddof),)

    return Tensor._from_op(out, "variance", (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

class _SliceGrad:
    """Sparse gradient contribution: add ``grad`` into the parent's
    buffer at ``key`` instead of materializing a full zero array."""

    __slots__ = ("key", "grad")

    def __init__(self, key, grad):
        self.key = key
        self.grad = grad


def tslice(x: Tensor, key) -> Tensor:
    out = x.data[key]
    return Tensor._from_op(np.asarray(out), "slice", (x,), lambda g: (_SliceGrad(key, g),))


def concat(*tensors, axis: int = 0) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    if not tensors:
        raise ShapeError("concat of zero tensors")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(sizes)))

    return Tensor._from_op(out, "concat", tuple(tensors), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = x.data.transpose(axes)
    return Tensor._from_op(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def dropout_mask_apply(x: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Multiply by a 0/1 mask drawn outside the graph, scaled by 1/keep_prob."""
    if mask.shape != x.data.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match input {x.data.shape}")
    scaled = mask / keep_prob
    out = x.data * scaled
    return Tensor._from_op(out, "dropout-mask-apply", (x,), lambda g: (g * scaled,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be scalar. Interior nodes are freed afterwards (their
    closures and parent links dropped), so a second backward over the
    same graph raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (built under no_grad, or no grad leaves)")
    if loss._backward is _FREED:
        raise GraphError("graph already consumed by a previous backward")

    topo: list[Tensor] = []
    visited = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._backward is _FREED:
            raise GraphError("graph already consumed by a previous backward")
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned = {id(loss)}  # buffers safe to mutate in place

    def _own(parent, key):
        cur = grads.get(key)
        if cur is None:
            cur = np.zeros_like(parent.data)
        elif key not in owned:
            cur = np.array(cur)
        else:
            return cur
        grads[key] = cur
        owned.add(key)
        return cur

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        owned.discard(id(node))
        if g is None:
            continue
        if node._backward is None:  # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if isinstance(pg, _SliceGrad):
                _own(parent, key)[pg.key] += pg.grad
            elif key in grads:
                _own(parent, key)
                grads[key] += pg
            else:
                grads[key] = pg
        node._backward = _FREED
        node._parents = ()


# ---------------------------------------------------------------------------
# generic op dispatch and gradient checking
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv1d": conv1d,
    "maxpool1d": maxpool1d,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "mean": mean,
    "variance": variance,
    "sum": tsum,
    "slice": tslice,
    "concat": concat,
    "dropout-mask-apply": dropout_mask_apply,
    "reshape": reshape,
    "transpose": transpose,
}


def supported_ops() -> tuple:
    return tuple(sorted(_OPS))


def apply(op_tag: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by tag. Unknown tags raise ``ShapeError``."""
    try:
        fn = _OPS[op_tag]
    except KeyError:
        raise ShapeError(f"unsupported op_tag {op_tag!r}") from None
    return fn(*inputs, **attrs)


def gradcheck(op_tag: str, inputs: Sequence[np.ndarray], attrs: Optional[dict] = None,
              eps: float = 1e-5, rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients against central differences.

    The op output is contracted against a fixed random projection to a
    scalar, then every coordinate of every differentiable input is
    perturbed by +/- eps. Returns the worst relative error
    ``|analytic - numeric| / max(1, |analytic|)`` over all coordinates.
    Points must sit away from kinks (relu at 0, pool ties); eps must be
    in (0, 1e-2].
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    if op_tag not in _OPS:
        raise ShapeError(f"unsupported op_tag {op_tag!r}")
    attrs = dict(attrs or {})
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    def run(arrs, record=False):
        tensors = [Tensor(a, requires_grad=record) for a in arrs]
        return apply(op_tag, *tensors, **attrs), tensors

    out0, _ = run(arrays)
    projection = rng.standard_normal(out0.data.shape)

    out, tensors = run(arrays, record=True)
    loss = tsum(mul(out, Tensor(projection)))
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    with no_grad():
        for i, base in enumerate(arrays):
            flat = base.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = float(np.sum(run(arrays)[0].data * projection))
                flat[j] = orig - eps
                lo = float(np.sum(run(arrays)[0].data * projection))
                flat[j] = orig
                numeric = (hi - lo) / (2.0 * eps)
                a = float(analytic[i].reshape(-1)[j])
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > worst:
                    worst = err
    return worst


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    rows = [reshape(t, (1,) + t.data.shape) for t in tensors]
    return concat(rows, axis=0)


LOG_2PI = math.log(2.0 * math.pi)
