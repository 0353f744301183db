"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is tape-based: while a :class:`GradTape` is active, every primitive
whose inputs require gradients appends a node (inputs, output, backward
closure) to the tape. Nodes are appended in execution order, which is a valid
topological order, so the backward pass is a single reverse sweep.

Tapes are single-use and must not be shared across threads; parameters are
plain read-only tensors and may be shared freely.
"""

from __future__ import annotations

import threading

import numpy as np


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output of {op}")


class Tensor:
    """Dense n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None):
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def parameter(value, dtype=None):
    """A leaf tensor whose gradient is wanted."""
    return Tensor(np.asarray(value), requires_grad=True, dtype=dtype)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Records primitive applications; consumed by a single backward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "unbalanced tape nesting"
        return False

    def _record(self, inputs, output, backward_fn):
        output.requires_grad = True
        node = _Node(inputs, output, backward_fn)
        output.node = node
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every requires-grad leaf.

        Returns a map from leaf Tensor to a numpy gradient of the same shape.
        The tape is consumed; a second call raises.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if loss.node is None or loss.node not in set(self._nodes):
            raise ValueError("loss is detached from this tape")
        self._consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        leaf_grads = {}
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=inp.dtype)
                if inp.node is None:
                    bucket = leaf_grads
                    key = inp
                else:
                    bucket = grads
                    key = id(inp)
                if key in bucket:
                    bucket[key] = bucket[key] + g
                else:
                    bucket[key] = g
        for leaf, g in leaf_grads.items():
            assert g.shape == leaf.shape
        return _GradMap(leaf_grads)


class _GradMap:
    """Mapping from leaf tensors (by identity) to gradient arrays."""

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, tensor):
        return self._grads[tensor]

    def get(self, tensor, default=None):
        return self._grads.get(tensor, default)

    def __contains__(self, tensor):
        return tensor in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        return self._grads.items()


class no_grad:
    """Context manager masking any active tape (forward-only region)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _apply(op, inputs, value, backward_fn):
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(value)
    out.requires_grad = False
    out.node = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    """Elementwise sum; shapes must match or one operand is a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    value = a.data + b.data

    def backward(g):
        ga = g if a.shape == value.shape else np.sum(g).reshape(a.shape)
        gb = g if b.shape == value.shape else np.sum(g).reshape(b.shape)
        return ga, gb

    return _apply("add", (a, b), value, backward)


def mul(a, b):
    """Elementwise product; shapes must match or one operand is a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    value = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != value.shape:
            ga = np.sum(ga).reshape(a.shape)
        if b.shape != value.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _apply("mul", (a, b), value, backward)


def scale(a, factor):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    factor = float(factor)
    value = a.data * factor

    def backward(g):
        return (g * factor,)

    return _apply("scale", (a,), value, backward)


def matmul(a, b):
    """2-D @ 2-D or 2-D @ 1-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul expects 2-D @ (1|2)-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dim mismatch: {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def backward(g):
        if b.data.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        return np.outer(g, b.data), a.data.T @ g

    return _apply("matmul", (a, b), value, backward)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _apply("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    value = a.data.reshape(shape)
    return _apply("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def linear(x, weight, bias=None):
    """Affine map y = x W^T + b with weight of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2:
        raise ValueError("linear weight must be 2-D (out, in)")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear dim mismatch: x {x.shape} vs W {weight.shape}")
    value = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError("linear bias shape mismatch")
        value = value + bias.data
        inputs.append(bias)

    if x.data.ndim == 2:

        def backward(g):
            grads = [g @ weight.data, g.T @ x.data]
            if bias is not None:
                grads.append(g.sum(axis=0))
            return grads

    elif x.data.ndim == 1:

        def backward(g):
            grads = [weight.data.T @ g, np.outer(g, x.data)]
            if bias is not None:
                grads.append(g)
            return grads

    else:
        raise ValueError("linear input must be 1-D or 2-D")

    return _apply("linear", tuple(inputs), value, backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    value = xhat * gamma.data + beta.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gx_hat = g * gamma.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = (gx_hat - m1 - xhat * m2) * inv_sigma
        return gx, ggamma, gbeta

    return _apply("layer_norm", (x, gamma, beta), value, backward)


def softmax(x, axis=-1, tau=None):
    """softmax(x / tau) along an axis."""
    x = as_tensor(x)
    inv_tau = 1.0 if tau is None else 1.0 / float(tau)
    z = x.data * inv_tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return ((value * (g - inner)) * inv_tau,)

    return _apply("softmax", (x,), value, backward)


def log_softmax(x, axis=-1, tau=None):
    """log(softmax(x / tau)) along an axis."""
    x = as_tensor(x)
    inv_tau = 1.0 if tau is None else 1.0 / float(tau)
    z = x.data * inv_tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    value = z - lse
    soft = np.exp(value)

    def backward(g):
        return ((g - soft * g.sum(axis=axis, keepdims=True)) * inv_tau,)

    return _apply("log_softmax", (x,), value, backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Gaussian error linear unit (tanh form)."""
    x = as_tensor(x)
    cubic = x.data + 0.044715 * x.data**3
    t = np.tanh(_GELU_C * cubic)
    value = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return _apply("gelu", (x,), value, backward)


def l2_normalize(x, axis=-1):
    """x / ||x||_2 along an axis; a zero slice raises NumericError."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        value = x.data / norm

    def backward(g):
        inner = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / norm - x.data * inner / norm**3,)

    return _apply("l2_normalize", (x,), value, backward)


def mean(x, axis=None):
    x = as_tensor(x)
    value = x.data.mean(axis=axis)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g / count, dtype=x.dtype),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _apply("mean", (x,), value, backward)


def total(x, axis=None):
    """Sum of all entries (or along an axis)."""
    x = as_tensor(x)
    value = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("total", (x,), value, backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of zero tensors")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return [
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis)
            for i in range(len(tensors))
        ]

    return _apply("concat", tuple(tensors), value, backward)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        return [g[i] for i in range(len(tensors))]

    return _apply("stack", tuple(tensors), value, backward)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along an axis."""
    x = as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow [{start}:{start + length}) out of range on axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    value = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return (full,)

    return _apply("narrow", (x,), value, backward)


def scaled_dot_product_attention(q, k, v, num_heads):
    """Multi-head attention on (tokens, dim) tensors; returns (tokens, dim)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    tokens, dim = q.shape
    if dim % num_heads != 0:
        raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError("attention expects q, k, v of identical shape")
    head_dim = dim // num_heads

    def split(t):
        return t.reshape(tokens, num_heads, head_dim).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    inv_sqrt = 1.0 / np.sqrt(head_dim)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out_h = attn @ vh
    value = out_h.transpose(1, 0, 2).reshape(tokens, dim)

    def backward(g):
        gh = g.reshape(tokens, num_heads, head_dim).transpose(1, 0, 2)
        g_attn = gh @ vh.transpose(0, 2, 1)
        g_vh = attn.transpose(0, 2, 1) @ gh
        g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
        g_qh = (g_scores @ kh) * inv_sqrt
        g_kh = (g_scores.transpose(0, 2, 1) @ qh) * inv_sqrt

        def merge(t):
            return t.transpose(1, 0, 2).reshape(tokens, dim)

        return merge(g_qh), merge(g_kh), merge(g_vh)

    return _apply("attention", (q, k, v), value, backward)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def max_relative_error(got, want, floor_scale=1e-3):
    """Worst-case elementwise relative error between two gradients.

    Coordinates whose magnitude is below floor_scale times the gradient's
    max-norm are measured against that floor instead: central differences are
    roundoff-limited there and a raw ratio would only amplify oracle noise.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        raise ValueError("gradient shapes differ")
    scale = max(np.max(np.abs(want)), np.finfo(np.float64).tiny)
    denom = np.maximum(np.maximum(np.abs(want), np.abs(got)), floor_scale * scale)
    return float(np.max(np.abs(got - want) / denom))


def finite_diff_gradient(f, p, eps=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(p))
        flat[i] = orig - eps
        lo = float(f(p))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("non-finite objective during finite differencing")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
