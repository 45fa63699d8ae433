"""Small reverse-mode autodiff over 2-D numpy arrays.

Each op records a closure that pushes the output gradient to its inputs. The op set is
closed (what the Q-Formers and the sequence model need) and every backward rule is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(name):
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name):
    old = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=get_dtype()) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(self, Parameter) else g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``Parameter.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already ran on this graph")
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("backward called on a tensor with no recorded forward graph")
        order, seen, stack = [], set(), [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                node.grad = None
            node._backward = None
            node._parents = ()
        self._done = True


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=get_dtype()), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))


def _make(data, parents, backward):
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    """Elementwise sum; ``b`` may be a row vector broadcast over ``a``'s rows."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)

    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    x = as_tensor(x)
    y = _softmax(x.data)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accum(dx)

    return _make(y, (x, gain, bias), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _make(y, (x,), backward)


def embedding(table, ids):
    """Gather rows ``table[ids]``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    return _make(table.data[ids], (table,), backward)


def rows(x, start, stop):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accum(full)

    return _make(x.data[start:stop], (x,), backward)


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mismatched widths {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accum(g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        x._accum(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def mean_rows(x):
    """Column means, shape ``(1, d)``."""
    x = as_tensor(x)
    n = x.shape[0]

    def backward(g):
        x._accum(np.broadcast_to(g / n, x.shape).copy())

    return _make(x.data.mean(axis=0, keepdims=True), (x,), backward)


def total(x):
    """Sum of all entries (scalar)."""
    x = as_tensor(x)

    def backward(g):
        x._accum(np.full_like(x.data, g.reshape(())))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def attention(q, k, v, n_heads, causal=False):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q`` is ``(Lq, d)``; ``k`` and ``v`` are ``(Lk, d)``. With ``causal`` query ``t``
    sees keys ``0..t`` only (requires ``Lq == Lk``).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    lq, d = q.shape
    lk = k.shape[0]
    if k.shape != (lk, d) or v.shape != (lk, d) or d % n_heads:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {n_heads}")
    if causal and lq != lk:
        raise ShapeError("causal attention needs equal query and key lengths")
    hd = d // n_heads
    sc = 1.0 / float(np.sqrt(hd))
    qh = q.data.reshape(lq, n_heads, hd).transpose(1, 0, 2)
    kh = k.data.reshape(lk, n_heads, hd).transpose(1, 0, 2)
    vh = v.data.reshape(lk, n_heads, hd).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * sc
    if causal:
        s = np.where(np.tri(lq, lk, dtype=bool), s, -np.inf)
    p = _softmax(s)
    out = (p @ vh).transpose(1, 0, 2).reshape(lq, d)

    def backward(g):
        gh = g.reshape(lq, n_heads, hd).transpose(1, 0, 2)
        if v.requires_grad:
            v._accum((p.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(lk, d))
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * sc
        if q.requires_grad:
            q._accum((ds @ kh).transpose(1, 0, 2).reshape(lq, d))
        if k.requires_grad:
            k._accum((ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(lk, d))

    return _make(out, (q, k, v), backward)


def log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, weights=None):
    """Weighted mean of ``-log softmax(logits)[i, targets[i]]`` over rows."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy needs positive total weight")
    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(n), targets]
    loss = np.asarray((w * nll).sum() / wsum, dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        grad *= (w / wsum)[:, None] * g.reshape(())
        logits._accum(grad.astype(logits.data.dtype))

    return _make(loss, (logits,), backward)
