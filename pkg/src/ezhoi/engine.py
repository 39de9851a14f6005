"""numpy-backed reverse-mode autodiff engine.

Tensors wrap numpy arrays and record the operations that produced them as
closures over their parents. backward() replays those closures in reverse
topological order, accumulating gradients across shared subexpressions.

Broadcasting in elementwise ops is restricted: two shapes are compatible only
when one is a trailing suffix of the other (leading-batch broadcast) or a
scalar. Anything else must go through an explicit broadcast_to().
"""
from __future__ import annotations

import contextlib

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block. Leaf flags are untouched."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------ info
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad}{tag})"

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -------------------------------------------------------------- backward
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() on non-scalar of shape {self.shape} needs an explicit gradient")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t, g):
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_dtypes(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype.name} vs {b.dtype.name}")


def _suffix_compatible(sa, sb):
    if sa == sb or sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _check_broadcast(a, b):
    if not _suffix_compatible(a.shape, b.shape):
        raise ValueError(
            f"shapes {a.shape} and {b.shape} are not suffix-compatible; "
            f"use broadcast_to() for anything beyond leading-batch broadcast"
        )


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic
def add(a, b):
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b):
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def div(a, b):
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    _check_broadcast(a, b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _sum_to_shape(g / b.data, a.shape))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward)


def power(x, exponent):
    """Elementwise x**p for a constant float exponent."""
    p = float(exponent)
    out_data = x.data ** p

    def backward(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _node(out_data, (x,), backward)


def exp(x):
    out_data = np.exp(x.data)

    def backward(g):
        _accum(x, g * out_data)

    return _node(out_data, (x,), backward)


def log(x):
    out_data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _node(out_data, (x,), backward)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def backward(g):
        _accum(x, g * 0.5 / out_data)

    return _node(out_data, (x,), backward)


# Backward rules routed through module-level helpers so a test harness can
# inject faults into a single rule and watch the checker catch it.
def _tanh_bwd(y):
    return 1.0 - y * y


def _sigmoid_bwd(y):
    return y * (1.0 - y)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu_bwd(x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def tanh(x):
    out_data = np.tanh(x.data)

    def backward(g):
        _accum(x, g * _tanh_bwd(out_data))

    return _node(out_data, (x,), backward)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * _sigmoid_bwd(out_data))

    return _node(out_data, (x,), backward)


def gelu(x):
    """tanh-form gaussian error linear unit (smooth, so finite differences behave)."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        _accum(x, g * _gelu_bwd(x.data, t))

    return _node(out_data, (x,), backward)


def clamp(x, lo, hi):
    out_data = np.clip(x.data, lo, hi)
    passes = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)

    def backward(g):
        _accum(x, g * passes)

    return _node(out_data, (x,), backward)


# --------------------------------------------------------------------- shape
def reshape(x, shape):
    orig = x.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(orig))

    return _node(out_data, (x,), backward)


def transpose(x, axes=None):
    out_data = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _node(out_data, (x,), backward)


def take(x, key):
    """Basic indexing (ints, slices, tuples thereof); no repeats, so views add safely."""
    out_data = x.data[key].copy()

    def backward(g):
        gz = np.zeros_like(x.data)
        gz[key] += g
        _accum(x, gz)

    return _node(out_data, (x,), backward)


def cat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accum(t, g[tuple(sl)])
            start += n

    return _node(out_data, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _node(out_data, tuple(tensors), backward)


def broadcast_to(x, shape):
    """Explicit numpy-style broadcast; the only way to stretch interior axes."""
    out_data = np.broadcast_to(x.data, shape).copy()
    orig = x.shape

    def backward(g):
        _accum(x, _sum_to_shape(g, orig))

    return _node(out_data, (x,), backward)


def gather_rows(x, indices):
    """Rows x[indices] along axis 0; indices is a plain integer array."""
    idx = np.asarray(indices)
    out_data = x.data[idx]

    def backward(g):
        gz = np.zeros_like(x.data)
        np.add.at(gz, idx, g)
        _accum(x, gz)

    return _node(out_data, (x,), backward)


def scatter_rows(base, indices, rows):
    """Copy of base with base[indices] replaced by rows. Indices must be unique."""
    idx = np.asarray(indices)
    if len(np.unique(idx)) != idx.size:
        raise ValueError("scatter_rows requires unique indices")
    _check_dtypes(base, rows)
    out_data = base.data.copy()
    out_data[idx] = rows.data

    def backward(g):
        gb = g.copy()
        gb[idx] = 0.0
        _accum(base, gb)
        _accum(rows, g[idx])

    return _node(out_data, (base, rows), backward)


# ---------------------------------------------------------------- reductions
def _axes_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _axes_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=axes if axis is not None else None, keepdims=keepdims)

    def backward(g):
        _accum(x, _expand_reduced(g, x.shape, axes, keepdims))

    return _node(out_data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _axes_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes if axis is not None else None, keepdims=keepdims)

    def backward(g):
        _accum(x, _expand_reduced(g, x.shape, axes, keepdims) / count)

    return _node(out_data, (x,), backward)


# ------------------------------------------------------------------- nn ops
def softmax(x, axis=-1):
    """Row-stochastic softmax with max subtraction for stability."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _node(out_data, (x,), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out_data = x.data / n

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, (g - out_data * dot) / n)

    return _node(out_data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    _check_dtypes(x, gamma)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    out_data = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out_data, (x, gamma, beta), backward)


def matmul(a, b):
    """Matrix product; batched when leading dims match or one side is 2-d."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    _check_dtypes(a, b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _sum_to_shape(ga, a.shape))
        _accum(b, _sum_to_shape(gb, b.shape))

    return _node(out_data, (a, b), backward)


def multi_head_attention(q, k, v, w_out, n_heads, b_out=None):
    """Scaled dot-product attention per head, heads concatenated, output-projected.

    q: [L_q, d] or [B, L_q, d]; k, v likewise over L_k. Scale is 1/sqrt(d/n_heads).
    The only learned piece inside is the output projection w_out, which may
    be rectangular (d x d_out).
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    squeeze = q.ndim == 2
    if squeeze:
        q = reshape(q, (1,) + q.shape)
        k = reshape(k, (1,) + k.shape)
        v = reshape(v, (1,) + v.shape)
    bsz, lq = q.shape[0], q.shape[1]
    lk = k.shape[1]

    def split_heads(t, length):
        return transpose(reshape(t, (bsz, length, n_heads, hd)), (0, 2, 1, 3))

    qh = split_heads(q, lq)
    kh = split_heads(k, lk)
    vh = split_heads(v, lk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(att, vh), (0, 2, 1, 3)), (bsz, lq, d))
    out = matmul(ctx, w_out)
    if b_out is not None:
        out = add(out, b_out)
    if squeeze:
        out = reshape(out, (lq, out.shape[-1]))
    return out


# ----------------------------------------------------------------- optimizer
class AdamW:
    """Adam with decoupled weight decay (update includes -lr*wd*p independent of moments)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = [
            {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for p in self.params
        ]

    def step(self):
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            st["step"] += 1
            t = st["step"]
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            mhat = st["m"] / (1.0 - self.beta1 ** t)
            vhat = st["v"] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------- gradient checks
def finite_difference_check(loss_fn, named_params, rng, n_probes=3, step=1e-5):
    """Compare analytic gradients of loss_fn() against central differences.

    loss_fn rebuilds the graph on every call and must be deterministic in the
    parameter values. Probes a seeded sample of entries per tensor. Returns
    {name: max floored relative error}, where the error for one entry is
    |a - n| / max(|a|, |n|, 1e-2).
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named_params}

    results = {}
    for name, p in named_params:
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        n = min(n_probes, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                lp = loss_fn().item()
            flat[i] = orig - step
            with no_grad():
                lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
            worst = max(worst, rel)
        results[name] = worst
    for _, p in named_params:
        p.grad = None
    return results
