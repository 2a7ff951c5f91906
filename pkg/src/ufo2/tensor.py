"""Reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the operations the model graph needs: matrix products,
masked softmax, chunk-aware 1-D convolution, layer norm, the usual
activations, stop-gradient, straight-through Gumbel softmax, and a
finite-difference checker that every backward rule is verified against.

Storage is flat row-major (C-order numpy). Broadcasting is limited to
what the model uses: bias adds, scalar scales, and mask multiplies.
Tensors are treated as immutable once created; only the optimizer and
the finite-difference harness write into leaf ``.data`` buffers, and
only between graphs. A graph is recorded per forward pass and dropped
after ``backward``.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, GraphError, MaskError, ShapeError

_STATE = {"dtype": np.float32, "grad": True}

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def set_precision(name):
    """Set the global float width: "f32" for training, "f64" for verification."""
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _STATE["dtype"] = _PRECISIONS[name]


def get_precision():
    return "f32" if _STATE["dtype"] is np.float32 else "f64"


def default_dtype():
    return _STATE["dtype"]


@contextmanager
def precision(name):
    prev = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (decode/eval paths)."""
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


class Tensor:
    """A dense array node in the reverse-mode graph.

    ``data`` is a numpy array in the active precision, ``grad`` (same
    shape) is populated by :func:`backward`. Non-leaf tensors carry the
    recorded parents and a backward closure until the graph is dropped.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_STATE["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _make(out_data, parents, backward_fn):
    """Wrap an op result, recording the backward closure only when needed."""
    track = _STATE["grad"] and any(p.requires_grad for p in parents)
    out = Tensor(out_data)
    if track:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape`` by summing."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)

    def bwd(out):
        _accum(a, -out.grad)

    return _make(-a.data, (a,), bwd)


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def scale(a, s):
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    s = float(s)

    def bwd(out):
        _accum(a, out.grad * s)

    return _make(a.data * s, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = _as_tensor(a)
    old_shape = a.shape

    def bwd(out):
        _accum(a, out.grad.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(out):
        _accum(a, np.transpose(out.grad, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bwd)


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(out):
        pieces = np.split(out.grad, offsets, axis=axis)
        for p, g in zip(parts, pieces):
            if p.requires_grad:
                _accum(p, g)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def gather_rows(a, idx):
    """Select rows of ``a`` along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects a 1-D index array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for axis of size {a.shape[0]}")

    def bwd(out):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, out.grad)
        _accum(a, buf)

    return _make(a.data[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    a = _as_tensor(a)

    def bwd(out):
        _accum(a, np.full(a.shape, out.grad, dtype=a.data.dtype))

    return _make(a.data.sum(), (a,), bwd)


def mean_all(a):
    a = _as_tensor(a)
    n = a.size

    def bwd(out):
        _accum(a, np.full(a.shape, out.grad / n, dtype=a.data.dtype))

    return _make(a.data.mean(), (a,), bwd)


def sum_axis(a, axis, keepdims=False):
    a = _as_tensor(a)

    def bwd(out):
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_axis(a, axis, keepdims=False):
    a = _as_tensor(a)
    n = a.shape[axis]

    def bwd(out):
        g = out.grad / n
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# elementwise


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(out):
        _accum(a, out.grad * out.data)

    return _make(out_data, (a,), bwd)


def log(a):
    a = _as_tensor(a)

    def bwd(out):
        _accum(a, out.grad / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(out):
        _accum(a, out.grad * 0.5 / out.data)

    return _make(out_data, (a,), bwd)


def _sigmoid(x):
    # split by sign for stability
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def bwd(out):
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _make(s, (a,), bwd)


def swish(a):
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def bwd(out):
        _accum(a, out.grad * (s + a.data * s * (1.0 - s)))

    return _make(a.data * s, (a,), bwd)


def glu(a):
    """Split the last axis in half and gate: first * sigmoid(second)."""
    a = _as_tensor(a)
    d = a.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"glu needs an even last dimension, got {d}")
    h = d // 2
    left = a.data[..., :h]
    right = a.data[..., h:]
    s = _sigmoid(right)

    def bwd(out):
        g = np.empty_like(a.data)
        g[..., :h] = out.grad * s
        g[..., h:] = out.grad * left * s * (1.0 - s)
        _accum(a, g)

    return _make(left * s, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    out_data = a.data @ b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    return _make(out_data, (a, b), bwd)


def bmm(a, b):
    """Batched matrix product: [N,m,k] x [N,k,n] -> [N,m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    out_data = a.data @ b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ out.grad)

    return _make(out_data, (a, b), bwd)


def linear(x, w, b=None):
    """Affine map over the last axis: x @ w + b, for x of any leading shape."""
    x = _as_tensor(x)
    if x.ndim == 2:
        out = matmul(x, w)
    else:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1]))
        out = reshape(matmul(flat, w), lead + (w.shape[-1],))
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(x, gain, shift, eps=1e-5):
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + shift.data

    def bwd(out):
        g = out.grad
        if shift.requires_grad:
            _accum(shift, _unbroadcast(g, shift.shape))
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gain, shift), bwd)


def masked_softmax(logits, bias):
    """Softmax over the last axis of (logits + bias).

    Positions where ``bias`` is -inf get exactly zero weight and
    contribute zero gradient. Rows must keep at least one finite entry.
    """
    logits, bias = _as_tensor(logits), _as_tensor(bias)
    z = logits.data + bias.data
    if np.isneginf(z).all(axis=-1).any():
        raise MaskError("masked_softmax: a row is entirely masked (all -inf)")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(out):
        g = out.grad
        dz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if logits.requires_grad:
            _accum(logits, _unbroadcast(dz, logits.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(dz, bias.shape))

    return _make(y, (logits, bias), bwd)


def log_softmax(x):
    """Log-softmax over the last axis (numerically stabilized)."""
    x = _as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse

    def bwd(out):
        g = out.grad
        _accum(x, g - np.exp(out.data) * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv1d(x, kernel, validity=None, causal=False):
    """1-D convolution over the time axis with per-frame future bounds.

    ``x`` is [T, d_in] or [B, T, d_in]. A 3-D ``kernel`` [k, d_in, d_out]
    selects the full convolution, a 2-D kernel [k, d] the depthwise one.
    Output frame t reads inputs t-(k-1)/2 .. t+(k-1)/2 (t-k+1 .. t when
    ``causal``); taps at positions < 0, >= T, or beyond ``validity[t]``
    are replaced by zero and receive no gradient.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim not in (2, 3):
        raise ShapeError(f"conv1d kernel must be [k,d_in,d_out] or depthwise [k,d], got {tuple(kernel.shape)}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    depthwise = kernel.ndim == 2
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d input must be [T,d] or [B,T,d], got {tuple(x.shape)}")
    B, T, din = xd.shape

    if causal:
        offsets = np.arange(k) - (k - 1)
    else:
        offsets = np.arange(k) - (k - 1) // 2
    src = np.arange(T)[:, None] + offsets[None, :]          # [T, k]
    keep = (src >= 0) & (src < T)                            # [T, k]
    if validity is not None:
        v = np.asarray(validity, dtype=np.int64)
        if v.ndim == 1:
            v = np.broadcast_to(v, (B, T))
        if v.shape != (B, T):
            raise ShapeError(f"validity shape {v.shape} does not match input [B={B}, T={T}]")
        if (v < np.arange(T)).any():
            raise ConfigError("conv1d validity must satisfy validity[t] >= t")
        keep = keep[None] & (src[None] <= v[:, :, None])     # [B, T, k]
    else:
        keep = np.broadcast_to(keep[None], (B, T, k))
    srcc = np.clip(src, 0, T - 1)

    flat = xd.reshape(B * T, din)
    rows = (np.arange(B)[:, None, None] * T + srcc[None]).reshape(-1)  # [B*T*k]
    gathered = flat[rows].reshape(B, T, k, din)
    gathered = gathered * keep[..., None]

    if depthwise:
        out_data = np.einsum("btkd,kd->btd", gathered, kernel.data)
    else:
        dout = kernel.shape[2]
        out_data = gathered.reshape(B * T, k * din) @ kernel.data.reshape(k * din, dout)
        out_data = out_data.reshape(B, T, dout)
    if squeeze:
        out_data = out_data[0]

    def bwd(out):
        g = out.grad[None] if squeeze else out.grad
        if depthwise:
            if kernel.requires_grad:
                _accum(kernel, np.einsum("btkd,btd->kd", gathered, g))
            dg = g[:, :, None, :] * kernel.data[None, None]           # [B,T,k,d]
        else:
            dout_ = kernel.shape[2]
            gf = g.reshape(B * T, dout_)
            if kernel.requires_grad:
                dk = gathered.reshape(B * T, k * din).T @ gf
                _accum(kernel, dk.reshape(kernel.shape))
            dg = (gf @ kernel.data.reshape(k * din, dout_).T).reshape(B, T, k, din)
        if x.requires_grad:
            dg = dg * keep[..., None]
            buf = np.zeros((B * T, din), dtype=xd.dtype)
            np.add.at(buf, rows, dg.reshape(-1, din))
            dx = buf.reshape(B, T, din)
            _accum(x, dx[0] if squeeze else dx)

    return _make(out_data, (x, kernel), bwd)


# ---------------------------------------------------------------------------
# special ops


def stop_gradient(x):
    """Identity forward; contributes exactly zero gradient to ancestors."""
    x = _as_tensor(x)
    return Tensor(x.data)


def gumbel_softmax_st(logits, temperature, noise=None):
    """Straight-through Gumbel softmax over the last axis.

    Forward emits a hard one-hot at argmax((logits + noise) / temperature);
    backward applies the soft softmax Jacobian at the same point. With
    ``noise`` omitted the selection is the plain argmax (deterministic).
    """
    logits = _as_tensor(logits)
    if temperature <= 0:
        raise ConfigError(f"gumbel temperature must be positive, got {temperature}")
    z = logits.data if noise is None else logits.data + np.asarray(noise, dtype=logits.data.dtype)
    z = z / temperature
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    soft = e / e.sum(axis=-1, keepdims=True)
    hard = np.zeros_like(soft)
    idx = z.argmax(axis=-1)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)

    def bwd(out):
        g = out.grad
        dz = soft * (g - (g * soft).sum(axis=-1, keepdims=True)) / temperature
        _accum(logits, dz)

    return _make(hard, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Run reverse accumulation from a scalar root and drop the graph."""
    if not isinstance(root, Tensor):
        raise GraphError("backward root must be a Tensor")
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    if root._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")

    # iterative DFS postorder: recording order is a valid reverse traversal
    topo = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    root.grad = np.ones((), dtype=root.data.dtype).reshape(root.shape)
    for node in reversed(topo):
        fn = node._backward
        if fn is not None:
            fn(node)
            node._backward = None
            node._parents = ()
            node._consumed = True
    root._consumed = True


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, params, step=1e-5, samples=None, rng=None):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure returning a scalar Tensor and
    rebuilding its graph on every call. ``params`` maps names to leaf
    tensors whose ``.data`` this harness perturbs in place. When
    ``samples`` is given, that many randomly chosen elements are checked
    in total; otherwise every element is. Returns (max relative error,
    {name: max relative error}).
    """
    out = f()
    if out.size != 1:
        raise GraphError("grad_check target must return a scalar")
    backward(out)
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic[name] = np.array(g, dtype=np.float64).reshape(-1)
        p.grad = None

    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in picks]

    report = {name: 0.0 for name in params}
    with no_grad():
        for name, i in coords:
            flat = params[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[name][i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            if rel > report[name]:
                report[name] = rel
    max_err = max(report.values()) if report else 0.0
    return max_err, report
