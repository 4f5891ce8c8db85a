"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small. Tensors wrap numpy arrays, primitives
compute their forward value eagerly and register a backward closure when
any input requires a gradient, and ``backward`` walks the recorded graph
once in reverse topological order, accumulating gradients across fan-out.
Double precision is the only supported dtype; the finite-difference
checks in the test suite rely on it.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "ContractError",
    "no_grad",
    "backward",
    "grad_check",
    "apply_primitive",
    "matmul",
    "add",
    "mul",
    "transpose",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "embedding",
    "concat",
    "slice_axis",
    "sum_",
    "mean_",
    "cross_entropy_with_logits",
    "row_scale",
    "pairwise_sum",
]


class DimensionError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class NumericError(FloatingPointError):
    """A primitive produced a non-finite value."""


class ContractError(ValueError):
    """An operation was invoked outside its documented contract."""


# Flipping this off removes the per-primitive finiteness scan. Training and
# the test suite keep it on; it is the mechanism behind divergence aborts.
CHECK_FINITE = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` accumulates additively across ``backward`` calls until
    ``zero_grad`` resets it, so repeated backward passes sum their
    contributions by design.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_lift(other), Tensor(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(kind, values, parents, backward_fn):
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise NumericError(f"{kind}: produced a non-finite value")
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.sum(grad).reshape(shape)
    if len(shape) == 1 and grad.ndim == 2 and shape[0] == grad.shape[1]:
        return grad.sum(axis=0)
    raise DimensionError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_broadcast(kind, a, b):
    """Permit: equal shapes, a 2-D with b a (cols,) row vector, or b scalar."""
    if a.shape == b.shape:
        return
    if b.size == 1:
        return
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return
    raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    _check_broadcast("add", a, b)
    values = a.values + b.values

    def back(g):
        return g, _reduce_to(g, b.shape)

    return _result("add", values, (a, b), back)


def mul(a, b):
    """Elementwise product; b may be a row vector over a's columns or scalar."""
    _check_broadcast("multiply", a, b)
    values = a.values * b.values
    av, bv = a.values, b.values

    def back(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _result("multiply", values, (a, b), back)


def matmul(a, b):
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    values = a.values @ b.values
    av, bv = a.values, b.values

    def back(g):
        return g @ bv.T, av.T @ g

    return _result("matmul", values, (a, b), back)


def transpose(a):
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got shape {a.shape}")
    values = a.values.T.copy()

    def back(g):
        return (g.T,)

    return _result("transpose", values, (a,), back)


def tanh(a):
    values = np.tanh(a.values)

    def back(g):
        return (g * (1.0 - values * values),)

    return _result("tanh", values, (a,), back)


def sigmoid(a):
    values = 1.0 / (1.0 + np.exp(-a.values))

    def back(g):
        return (g * values * (1.0 - values),)

    return _result("sigmoid", values, (a,), back)


def relu(a):
    values = np.maximum(a.values, 0.0)
    positive = a.values > 0.0

    def back(g):
        return (g * positive,)

    return _result("relu", values, (a,), back)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``. Entries where ``mask`` is False get exactly 0.

    A row with no allowed entries has no defined distribution and raises.
    """
    x = a.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax: mask shape {mask.shape} != input shape {x.shape}")
        if not np.all(np.any(mask, axis=axis)):
            raise ContractError("softmax: a slice along the softmax axis is fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    values = exps / np.sum(exps, axis=axis, keepdims=True)

    def back(g):
        inner = np.sum(g * values, axis=axis, keepdims=True)
        return (values * (g - inner),)

    return _result("softmax", values, (a,), back)


def log_softmax(a, axis=-1):
    x = a.values
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    values = x - lse

    def back(g):
        return (g - np.exp(values) * np.sum(g, axis=axis, keepdims=True),)

    return _result("log_softmax", values, (a,), back)


def logsumexp(a, axis=None, keepdims=False):
    x = a.values
    m = np.max(x, axis=axis, keepdims=True)
    values = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    soft = np.exp(x - values)
    if not keepdims:
        values = np.squeeze(values, axis=axis) if axis is not None else values.reshape(())

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (g * soft,)

    return _result("logsumexp", values, (a,), back)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit population variance."""
    x = a.values
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"layer_norm: bad shape {a.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    values = centered * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * values, axis=-1, keepdims=True)
        return (inv * (g - gm - values * gy),)

    return _result("layer_norm", values, (a,), back)


def embedding(table, indices):
    if table.values.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embedding: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding: index out of range for table with {table.shape[0]} rows"
        )
    values = table.values[idx]

    def back(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result("embedding", values, (table,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input list")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result("concat", values, tuple(tensors), back)


def slice_axis(a, start, stop, axis=1):
    nd = a.values.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"slice: axis {axis} out of range for shape {a.shape}")
    extent = a.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ContractError(f"slice: [{start}:{stop}] out of range for axis of size {extent}")
    index = [slice(None)] * nd
    index[axis] = slice(start, stop)
    index = tuple(index)
    values = a.values[index].copy()

    def back(g):
        ga = np.zeros_like(a.values)
        ga[index] = g
        return (ga,)

    return _result("slice", values, (a,), back)


def sum_(a, axis=None, keepdims=False):
    values = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", values, (a,), back)


def mean_(a, axis=None, keepdims=False):
    values = a.values.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.values.size if axis is None else a.shape[axis]

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, shape) / count,)

    return _result("mean", values, (a,), back)


def cross_entropy_with_logits(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmaxes."""
    if logits.values.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    rows, classes = logits.shape
    if idx.shape != (rows,):
        raise DimensionError(
            f"cross_entropy: targets shape {idx.shape} != ({rows},) for logits {logits.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise ContractError(f"cross_entropy: target outside [0, {classes})")
    x = logits.values
    m = np.max(x, axis=1, keepdims=True)
    lse = (m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True))).reshape(-1)
    picked = x[np.arange(rows), idx]
    values = np.float64(np.mean(lse - picked))
    soft = np.exp(x - lse[:, None])

    def back(g):
        gl = soft.copy()
        gl[np.arange(rows), idx] -= 1.0
        return (gl * (float(g) / rows),)

    return _result("cross_entropy_with_logits", values, (logits,), back)


def row_scale(a, w):
    """Scale each row of 2-D ``a`` by the matching entry of vector ``w``."""
    if a.values.ndim != 2:
        raise DimensionError(f"row_scale: expected 2-D input, got {a.shape}")
    wv = w.values.reshape(-1)
    if wv.shape[0] != a.shape[0]:
        raise DimensionError(f"row_scale: {a.shape[0]} rows but {wv.shape[0]} weights")
    values = a.values * wv[:, None]
    av = a.values
    wshape = w.shape

    def back(g):
        return g * wv[:, None], np.sum(g * av, axis=1).reshape(wshape)

    return _result("row_scale", values, (a, w), back)


def pairwise_sum(a, b):
    """All-pairs row sums: output row t*B+u equals a[t] + b[u]."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sum: shapes {a.shape} and {b.shape} do not conform")
    ta, ub, width = a.shape[0], b.shape[0], a.shape[1]
    values = (a.values[:, None, :] + b.values[None, :, :]).reshape(ta * ub, width)

    def back(g):
        g3 = g.reshape(ta, ub, width)
        return g3.sum(axis=1), g3.sum(axis=0)

    return _result("pairwise_sum", values, (a, b), back)


_PRIMITIVES = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "multiply": lambda inputs, attrs: mul(*inputs),
    "transpose": lambda inputs, attrs: transpose(*inputs),
    "tanh": lambda inputs, attrs: tanh(*inputs),
    "sigmoid": lambda inputs, attrs: sigmoid(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "softmax": lambda inputs, attrs: softmax(inputs[0], **attrs),
    "log_softmax": lambda inputs, attrs: log_softmax(inputs[0], **attrs),
    "logsumexp": lambda inputs, attrs: logsumexp(inputs[0], **attrs),
    "layer_norm": lambda inputs, attrs: layer_norm(inputs[0], **attrs),
    "embedding": lambda inputs, attrs: embedding(inputs[0], attrs["indices"]),
    "concat": lambda inputs, attrs: concat(list(inputs), **attrs),
    "slice": lambda inputs, attrs: slice_axis(inputs[0], **attrs),
    "sum": lambda inputs, attrs: sum_(inputs[0], **attrs),
    "mean": lambda inputs, attrs: mean_(inputs[0], **attrs),
    "cross_entropy_with_logits": lambda inputs, attrs: cross_entropy_with_logits(
        inputs[0], attrs["targets"]
    ),
    "row_scale": lambda inputs, attrs: row_scale(*inputs),
    "pairwise_sum": lambda inputs, attrs: pairwise_sum(*inputs),
}


def apply_primitive(kind, inputs, attrs=None):
    """Dispatch a primitive by name. Unknown kinds are contract errors."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ContractError(f"unknown primitive kind: {kind!r}")
    return fn(list(inputs), dict(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order  # parents appear before children


def backward(root):
    """Accumulate d(root)/d(leaf) into every requires-grad leaf.

    Returns a map from leaf tensor to the gradient contributed by this call
    (the ``grad`` attribute holds the running sum across calls).
    """
    if root.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require a gradient")
    order = _toposort(root)
    pending = {id(root): np.ones_like(root.values)}
    leaf_grads = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            leaf_grads[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"backward: gradient shape {pg.shape} != tensor shape {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return leaf_grads


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar-valued function of one tensor. The error for
    each component is |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ContractError(f"grad_check: eps must be positive, got {eps}")
    base = np.array(x.values, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise ContractError("grad_check: function must return a scalar tensor")
    if out.requires_grad:
        analytic = backward(out).get(probe)
    else:
        analytic = None
    if analytic is None:
        analytic = np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    numeric_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi = float(f(Tensor(base)).values)
            flat[i] = original - eps
            lo = float(f(Tensor(base)).values)
            flat[i] = original
            numeric_flat[i] = (hi - lo) / (2.0 * eps)
    if base.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
