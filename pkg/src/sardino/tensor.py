"""Dense float tensors with exact, hand-derived backward passes.

Eager numpy forward evaluation plus a recorded graph of backward closures.
Every differentiable operation states its gradient in closed form; numeric
differentiation lives only in :mod:`sardino.gradcheck`, which checks these
formulas from the outside.

Conventions:
  * dtype follows the input arrays; float32 for training, float64 for
    gradient checking.
  * elementwise binary ops broadcast like numpy; gradients are summed back
    onto the original shapes.
  * matmul uses numpy's batched semantics and may parallelize internally
    through BLAS; operands must have rank >= 2.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

__all__ = [
    "TensorNode",
    "as_node",
    "add",
    "mul",
    "matmul",
    "softmax_with_temperature",
    "softmax_np",
    "log_softmax",
    "layer_norm",
    "gelu",
    "l2_normalize",
    "normalize_sum",
    "concat",
    "broadcast_to",
    "transpose",
    "reshape",
    "index",
    "tensor_sum",
    "tensor_mean",
    "GELU_TANH_COEFF",
]

GELU_TANH_COEFF = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)

# Backward closures receive (upstream_grad, send) where send(node, grad)
# routes a contribution to one parent. Contributions to the same node are
# summed before its own closure fires (reverse topological order).
BackwardFn = Callable[[np.ndarray, Callable], None]


class TensorNode:
    """One dense tensor in the computation graph.

    ``values`` is the forward result (computed eagerly); ``grad`` accumulates
    dL/dvalues during :meth:`backward` and exists only when ``requires_grad``.
    Shapes are fixed at creation.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward_fn: BackwardFn | None = None,
    ):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        return f"TensorNode(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "TensorNode":
        """Same values, no gradient history."""
        return TensorNode(self.values)

    def backward(self) -> None:
        """Accumulate gradients of this node w.r.t. every ancestor.

        Seeds d(self)/d(self) with ones and walks the recorded graph in
        reverse topological order. Grad buffers accumulate across calls until
        explicitly zeroed (the optimizer does that after each step).
        """
        topo = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}

        def send(node: "TensorNode", g: np.ndarray) -> None:
            if not node.requires_grad:
                return
            key = id(node)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g

        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad += g
            if node._backward_fn is not None:
                node._backward_fn(g, send)

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        if _is_pyscalar(other):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self) -> float:
        return float(self.values)


def as_node(x) -> TensorNode:
    """Wrap arrays/scalars as constant nodes; pass nodes through."""
    if isinstance(x, TensorNode):
        return x
    return TensorNode(x)


def _toposort(root: TensorNode) -> list[TensorNode]:
    topo: list[TensorNode] = []
    seen: set[int] = set()
    stack: list[tuple[TensorNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(values, parents: Sequence[TensorNode], backward: BackwardFn) -> TensorNode:
    """Build a graph node; constant-folds when no parent needs gradients."""
    if not any(p.requires_grad for p in parents):
        return TensorNode(values)
    return TensorNode(values, requires_grad=True, _parents=tuple(parents), _backward_fn=backward)


# ---- primitive operations ------------------------------------------------


def _is_pyscalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> TensorNode:
    # python scalars stay scalars so numpy's weak promotion preserves dtype
    if _is_pyscalar(a):
        a, b = b, a
    if _is_pyscalar(b):
        a = as_node(a)
        out = a.values + b

        def bwd_s(g, send):
            send(a, g)

        return _make(out, (a,), bwd_s)

    a, b = as_node(a), as_node(b)
    out = a.values + b.values

    def bwd(g, send):
        send(a, _unbroadcast(g, a.shape))
        send(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> TensorNode:
    if _is_pyscalar(a):
        a, b = b, a
    if _is_pyscalar(b):
        a = as_node(a)
        out = a.values * b

        def bwd_s(g, send):
            send(a, g * b)

        return _make(out, (a,), bwd_s)

    a, b = as_node(a), as_node(b)
    out = a.values * b.values

    def bwd(g, send):
        send(a, _unbroadcast(g * b.values, a.shape))
        send(b, _unbroadcast(g * a.values, b.shape))

    return _make(out, (a, b), bwd)


def matmul(a, b) -> TensorNode:
    """Batched matrix product; backward is dA = dC @ B^T, dB = A^T @ dC."""
    a, b = as_node(a), as_node(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def bwd(g, send):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        send(a, _unbroadcast(ga, a.shape))
        send(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bwd)


def reshape(a, shape) -> TensorNode:
    a = as_node(a)
    old = a.shape
    out = a.values.reshape(shape)

    def bwd(g, send):
        send(a, g.reshape(old))

    return _make(out, (a,), bwd)


def transpose(a, axes: Sequence[int]) -> TensorNode:
    a = as_node(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.values, axes))

    def bwd(g, send):
        send(a, np.transpose(g, inv))

    return _make(out, (a,), bwd)


def broadcast_to(a, shape) -> TensorNode:
    a = as_node(a)
    out = np.ascontiguousarray(np.broadcast_to(a.values, shape))

    def bwd(g, send):
        send(a, _unbroadcast(g, a.shape))

    return _make(out, (a,), bwd)


def concat(nodes: Iterable[TensorNode], axis: int) -> TensorNode:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.values for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, send):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            send(n, g[tuple(sl)])

    return _make(out, tuple(nodes), bwd)


def index(a, key) -> TensorNode:
    """Basic (slice/int) indexing; backward scatters into the source shape."""
    a = as_node(a)
    out = a.values[key]

    def bwd(g, send):
        full = np.zeros_like(a.values)
        full[key] = g
        send(a, full)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def tensor_sum(a, axis=None, keepdims: bool = False) -> TensorNode:
    a = as_node(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g, send):
        if axis is None:
            send(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            send(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bwd)


def tensor_mean(a, axis=None, keepdims: bool = False) -> TensorNode:
    a = as_node(a)
    if axis is None:
        count = a.values.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[i] for i in axis]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_np(logits: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    """Plain-array softmax with temperature; max-subtraction for stability."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_with_temperature(logits, tau: float, axis: int = -1) -> TensorNode:
    """softmax(logits / tau) along ``axis``.

    Backward: with y the output, dx = y * (g - sum(g * y)) / tau.
    """
    a = as_node(logits)
    y = softmax_np(a.values, tau, axis=axis)

    def bwd(g, send):
        dot = (g * y).sum(axis=axis, keepdims=True)
        send(a, (y * (g - dot)) / tau)

    return _make(y, (a,), bwd)


def log_softmax(logits, tau: float = 1.0, axis: int = -1) -> TensorNode:
    """log softmax(logits / tau); backward dx = (g - softmax * sum(g)) / tau."""
    a = as_node(logits)
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if not np.all(np.isfinite(a.values)):
        raise NumericError("log_softmax received non-finite logits")
    z = a.values / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g, send):
        send(a, (g - sm * g.sum(axis=axis, keepdims=True)) / tau)

    return _make(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> TensorNode:
    """Per-row normalization over the last axis, then affine gain/bias.

    xhat = (x - mean) / sqrt(var + eps); y = gain * xhat + bias.
    dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / sqrt(var + eps).
    """
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shape mismatch: x last dim {d}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = ((x.values - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = gain.values * xhat + bias.values

    def bwd(g, send):
        dxhat = g * gain.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        send(x, (dxhat - m1 - xhat * m2) * inv)
        red = tuple(range(g.ndim - 1))
        send(gain, (g * xhat).sum(axis=red))
        send(bias, g.sum(axis=red))

    return _make(out, (x, gain, bias), bwd)


def gelu(x) -> TensorNode:
    """Tanh-approximation GELU with its analytic derivative.

    y = 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715.
    """
    x = as_node(x)
    v = x.values
    inner = _GELU_SCALE * (v + GELU_TANH_COEFF * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bwd(g, send):
        dinner = _GELU_SCALE * (1.0 + 3.0 * GELU_TANH_COEFF * v**2)
        dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        send(x, g * dydx)

    return _make(out, (x,), bwd)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> TensorNode:
    """y = x / sqrt(sum(x^2) + eps) along ``axis``.

    dx = g / n - x * sum(g * x) / n^3 with n the smoothed norm.
    """
    x = as_node(x)
    n = np.sqrt((x.values**2).sum(axis=axis, keepdims=True) + eps)
    out = x.values / n

    def bwd(g, send):
        dot = (g * x.values).sum(axis=axis, keepdims=True)
        send(x, g / n - x.values * dot / n**3)

    return _make(out, (x,), bwd)


def normalize_sum(x, axis: int = -1) -> TensorNode:
    """y = x / sum(x) along ``axis``; dx = g / S - x-weighted correction.

    Intended for renormalizing non-negative attention rows, where the sum is
    safely bounded away from zero.
    """
    x = as_node(x)
    s = x.values.sum(axis=axis, keepdims=True)
    out = x.values / s

    def bwd(g, send):
        dot = (g * x.values).sum(axis=axis, keepdims=True)
        send(x, g / s - dot / s**2)

    return _make(out, (x,), bwd)
