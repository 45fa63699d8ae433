"""Layers, the Adam optimizer, and the checkpoint file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter

INIT_STD = 0.02


class Module:
    """Parameter container; names are attribute paths such as ``blocks.0.attn.wq.weight``."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    out.update(v.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, arr in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            p = params[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)


def normal_param(rng, shape, std=INIT_STD):
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = normal_param(rng, (d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, d, rng, mult=4):
        self.up = Linear(d, mult * d, rng)
        self.down = Linear(mult * d, d, rng)

    def __call__(self, x):
        return self.down(T.gelu(self.up(x)))


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    causal: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


class MultiHeadAttention(Module):
    def __init__(self, cfg, rng):
        self._cfg = cfg
        d = cfg.d_model
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, q_in, kv_in):
        q, k, v = self.wq(q_in), self.wk(kv_in), self.wv(kv_in)
        return self.wo(T.attention(q, k, v, self._cfg.n_heads, causal=self._cfg.causal))


class SelfAttentionBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""

    def __init__(self, d, n_heads, rng, causal=False):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(AttentionConfig(d, n_heads, causal), rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, rng)

    def __call__(self, x):
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h))
        return T.add(x, self.ff(self.ln2(x)))


class CrossAttentionBlock(Module):
    """Learned queries attend over a key/value sequence, then a feed-forward step.

    The attention sublayer has no query residual: the output is built only from the
    attended values, so the shared queries steer the pooling without swamping it.
    """

    def __init__(self, d, n_heads, rng):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(AttentionConfig(d, n_heads), rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, rng)
        self.ln_out = LayerNorm(d)

    def __call__(self, queries, kv):
        x = self.attn(self.ln_q(queries), self.ln_kv(kv))
        x = T.add(x, self.ff(self.ln2(x)))
        return self.ln_out(x)


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam. ``step`` raises if any gradient is NaN/Inf, naming the parameter."""

    def __init__(self, named_params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


MAGIC = b"MMAGCKPT"
_TAGS = {"f32": ("<f4", np.float32), "f64": ("<f8", np.float64)}


def save_checkpoint(path, arrays):
    """Write named float arrays: magic, u32 header length, text header, raw little-endian data."""
    header_lines = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"bad parameter name {name!r}")
        arr = np.ascontiguousarray(arr)
        tag = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(arr.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(_TAGS[tag][0]).tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        header_lines.append(f"{name}\t{tag}\t{shape}\t{offset}")
        blobs.append(raw)
        offset += len(raw)
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = blob[12 : 12 + hlen].decode("utf-8")
    data = memoryview(blob)[12 + hlen :]
    out = {}
    for line in header.splitlines():
        if not line:
            continue
        name, tag, shape, offset = line.split("\t")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        le, native = _TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype=le, count=count, offset=int(offset))
        out[name] = arr.reshape(shape).astype(native)
    return out
