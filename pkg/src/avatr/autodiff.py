"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float32 (or, for gradient checking, float64) ndarray
and remembers how it was produced.  Ops compute forward values eagerly
and, when any input participates in training, register a closure that
routes the output gradient back to the inputs.  ``Tensor.backward`` runs
those closures in reverse topological order, accumulating with ``+=`` so
values feeding several consumers receive the sum of their contributions.
Accumulation order is fixed by the (deterministic) graph order, which
keeps whole training runs bit-reproducible for a given seed.

The op set is exactly what the extraction models and their loss need:
dense matmul/linear, 1-D convolution and transposed convolution, row-wise
softmax and layer norm, pointwise nonlinearities, dropout, reductions,
concat/slice/reshape plumbing, and log for the decibel-scale loss.
"""

import math

import numpy as np

from .errors import ConfigError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation.

    Attributes:
        data: the forward value, float32 or float64, treated as immutable
            once consumed by an op (only the optimizer rewrites it,
            between graph builds).
        grad: same-shape array accumulated by ``backward``, or None.
        requires_grad: whether gradients should flow into this tensor.
        name: optional label used for parameter registries.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        # float32 is the production dtype; float64 flows only through numpy
        # values (or an explicit dtype=) so shadow graphs stay 64-bit while
        # python literals never silently promote a graph.
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and \
                np.asarray(data).dtype in _FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be a scalar (size 1).  Nodes are visited in exact
        reverse topological order of construction.
        """
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be scalar")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # Operator sugar; everything funnels into the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x), dtype=dtype)


def _topo_order(root):
    """Iterative post-order DFS; recursion-free for long op chains."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _make(data, parents, backward_fn):
    """Wrap a forward value; attach the backward closure only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast("mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast("div", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def scalar_mul(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a, b):
    """Matrix product for 1-D and 2-D operands (numpy ``@`` semantics)."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape, detail="rank must be 1 or 2")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)
        elif a.ndim == 2 and b.ndim == 1:  # (n,k)@(k,) -> (n,)
            _accumulate(a, np.outer(g, bd))
            _accumulate(b, ad.T @ g)
        elif a.ndim == 1 and b.ndim == 2:  # (k,)@(k,m) -> (m,)
            _accumulate(a, bd @ g)
            _accumulate(b, np.outer(ad, g))
        else:  # dot product -> scalar
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)

    return _make(ad @ bd, (a, b), backward)


def linear(x, w, b=None):
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out).

    Fused as one node: this is the hottest op in the attention blocks and
    a single closure keeps the graph small.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim not in (1, 2) or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", b.shape, w.shape, detail="bias width")
        out = out + b.data
        parents.append(b)

    def backward(g):
        if x.ndim == 2:
            _accumulate(x, g @ w.data.T)
            _accumulate(w, x.data.T @ g)
            if b is not None:
                _accumulate(b, g.sum(axis=0))
        else:
            _accumulate(x, w.data @ g)
            _accumulate(w, np.outer(x.data, g))
            if b is not None:
                _accumulate(b, g)

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# shape plumbing


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="rank must be 2")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", (), detail="empty input list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(key)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(a, key):
    """Basic slicing; gradient scatters back into a zero array."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            _accumulate(a, full)

    return _make(a.data[key], (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    # Piecewise form avoids overflow in exp for large |x|.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def softmax(a):
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        _accumulate(a, gy - y * gy.sum(axis=-1, keepdims=True))

    return _make(y, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize each row (last axis) to zero mean / unit variance, then
    apply the learned per-channel gain and bias."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = centered * inv

    def backward(g):
        gx = g * gamma.data
        if a.requires_grad:
            # d/dx of (x - mu) * inv with mu, inv functions of the row.
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, term * inv)
        reduce_axes = tuple(range(a.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=reduce_axes))
        _accumulate(beta, g.sum(axis=reduce_axes))

    return _make(gamma.data * xhat + beta.data, (a, gamma, beta), backward)


def dropout(a, p, train, rng=None):
    """Inverted dropout: scale kept units by 1/(1-p) at train time so the
    eval-time graph equals the train-time expectation.  Identity when not
    training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ConfigError("train-time dropout needs an explicit Generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    mask = keep * scale

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# 1-D convolution


def _out_frames(length, kernel, stride):
    if length < kernel:
        raise ShapeError("conv1d", (length,), (kernel,), detail="input shorter than kernel")
    return 1 + (length - kernel) // stride


def conv1d(x, w, stride):
    """Correlate ``x`` (C_in, T) with ``w`` (C_out, C_in, K) at ``stride``.

    Output is (C_out, N) with N = 1 + (T - K) // stride; trailing samples
    that do not fill a window are ignored (callers pad first).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    kernel = w.shape[2]
    n = _out_frames(x.shape[1], kernel, stride)
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=1)[:, ::stride][:, :n]
    out = np.einsum("cnk,ock->on", windows, w.data, optimize=True)

    def backward(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("on,cnk->ock", g, windows, optimize=True))
        if x.requires_grad:
            gwin = np.einsum("on,ock->cnk", g, w.data, optimize=True)
            gx = np.zeros_like(x.data)
            for k in range(kernel):
                gx[:, k : k + stride * n : stride] += gwin[:, :, k]
            _accumulate(x, gx)

    return _make(out, (x, w), backward)


def conv_transpose1d(y, w, stride):
    """Overlap-add transposed convolution: (C_in, N) -> (C_out, T) with
    T = (N - 1) * stride + K and ``w`` of shape (C_in, C_out, K)."""
    y, w = _as_tensor(y), _as_tensor(w)
    if y.ndim != 2 or w.ndim != 3 or y.shape[0] != w.shape[0]:
        raise ShapeError("conv_transpose1d", y.shape, w.shape)
    c_out, kernel = w.shape[1], w.shape[2]
    n = y.shape[1]
    length = (n - 1) * stride + kernel
    contrib = np.einsum("cn,cok->nok", y.data, w.data, optimize=True)
    out = np.zeros((c_out, length), dtype=y.dtype)
    for k in range(kernel):
        out[:, k : k + stride * n : stride] += contrib[:, :, k].T

    def backward(g):
        gwin = np.lib.stride_tricks.sliding_window_view(g, kernel, axis=1)[:, ::stride][:, :n]
        if y.requires_grad:
            _accumulate(y, np.einsum("onk,cok->cn", gwin, w.data, optimize=True))
        if w.requires_grad:
            _accumulate(w, np.einsum("cn,onk->cok", y.data, gwin, optimize=True))

    return _make(out, (y, w), backward)


# ---------------------------------------------------------------------------
# gradient verification


def check_gradients(loss_fn, params, h=1e-4):
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` rebuilds the scalar loss from scratch on every call (the
    closure *is* the graph); ``params`` are the leaf tensors perturbed in
    place.  All parameters must be float64 so that the h**2 truncation
    error of the central difference dominates rounding.

    Returns:
        Max over all parameter entries of
        ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("gradient checks require float64 parameters")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = float(loss_fn().data)
            flat[i] = saved - h
            down = float(loss_fn().data)
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Scale all gradients jointly so the global L2 norm is <= max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = np.asarray(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= factor.astype(p.grad.dtype)
    return norm
