"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian closure on the
output tensor. ``backward`` orders the recorded graph topologically and runs
the closures in reverse, accumulating into ``.grad``.

Arrays are numpy, row-major. Compute defaults to float32; gradient checking
switches to float64 via :func:`default_dtype`.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __len__(self):
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor.

        Repeated calls accumulate; call ``zero_grad`` on parameters in between.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accum(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scalar_mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    parents = tuple(parents)
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def parameter(data, dtype=None):
    return Tensor(np.array(data, dtype=dtype or _dtype()), requires_grad=True)


def tensor(data, dtype=None):
    return Tensor(np.array(data, dtype=dtype or _dtype()))


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from e

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def mul(a, b):
    a, b = _lift(a), _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from e

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scalar_mul(a, s):
    s = a.data.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def sigmoid(a):
    # tanh form avoids exp overflow for large |x|
    half = a.data.dtype.type(0.5)
    out = half * (np.tanh(half * a.data) + 1)

    def bw(g):
        return (g * out * (1 - out),)

    return _make(out, (a,), bw, "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def elu(a, alpha=1.0):
    x = a.data
    alpha = x.dtype.type(alpha)
    neg_part = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part)

    def bw(g):
        return (g * np.where(x > 0, 1, neg_part + alpha),)

    return _make(out, (a,), bw, "elu")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


# -- shape ------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def index(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "index")


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, bw, "concat")


def concat_lastdim(a, b):
    return concat([a, b], axis=-1)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, bw, "stack")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, numpy broadcasting over the rest."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def causal_conv1d(x, kernel, bias=None):
    """Causal convolution along the time axis.

    ``x`` is ``[..., T, Cin]``, ``kernel`` is ``[k, Cin, Cout]``. The input is
    left-padded with ``k - 1`` zero rows so output row ``t`` reads only input
    rows ``t-k+1 .. t``.
    """
    if kernel.ndim != 3 or x.shape[-1] != kernel.shape[1]:
        raise DimensionError(f"causal_conv1d: x {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[0]
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    W = kernel.data
    out = xp[..., 0:T, :] @ W[0]
    for j in range(1, k):
        out = out + xp[..., j:j + T, :] @ W[j]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T, :] += g @ W[j].T
            gx = gxp[..., k - 1:, :]
        if kernel.requires_grad:
            lead = g.reshape(-1, g.shape[-1])
            gk = np.stack([
                xp[..., j:j + T, :].reshape(-1, W.shape[1]).T @ lead for j in range(k)
            ])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "causal_conv1d")


def embedding(ids, table):
    """Row lookup ``table[ids]``; gradients scatter-add into ``table``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), bw, "embedding")


# -- normalisation and losses -----------------------------------------------

def softmax(s, axis=-1):
    x = s.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (s,), bw, "softmax")


def softmax_flat(s):
    """Softmax over every element of ``s`` taken as one flat distribution."""
    flat = reshape(s, (-1,))
    return reshape(softmax(flat), s.shape)


def log_softmax_np(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, mask=None):
    """Mean of ``-log softmax(logits)[target]`` over unmasked positions.

    ``logits`` is ``[..., V]`` and ``targets``/``mask`` match its leading
    shape. With every position masked the loss is 0 with zero gradient.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    dt = logits.dtype.type
    loss = dt(-(picked * mask).sum() / n) if n else dt(0.0)

    def bw(g):
        if n == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return (p * (mask[..., None] * (g / n)),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def dropout(x, keep_prob, training, rng_key=(0,)):
    """Inverted dropout with a mask drawn from a Philox stream keyed by ``rng_key``.

    ``rng_key`` is a tuple of non-negative ints, typically ``(seed, step, layer)``.
    """
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1:
        return x
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in rng_key])))
    keep = gen.random(x.shape) < keep_prob
    scale = keep.astype(x.dtype) / x.dtype.type(keep_prob)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# -- init -------------------------------------------------------------------

def xavier_uniform(rng, shape, fan_in, fan_out, dtype=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)
