"""Parameter containers and the layers the denoiser is built from."""

from __future__ import annotations

import copy
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Tracks parameters and submodules in assignment order.

    Parameter names are the dotted attribute paths, e.g. ``enc.0.res.conv1.w``.
    """

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[key] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        from .errors import ConfigMismatch

        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise ConfigMismatch(f"checkpoint lacks tensor {name!r}")
            if state[name].shape != p.shape:
                raise ConfigMismatch(f"tensor {name!r}: checkpoint shape {state[name].shape}, "
                                     f"model shape {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def clone(self):
        """Deep copy with freshly allocated parameter arrays."""
        return copy.deepcopy(self)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    """``y = x @ w + b`` on row-major token matrices."""

    def __init__(self, d_in, d_out, rng, bias=True, std=None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.w = _param(rng.standard_normal((d_in, d_out)) * std)
        if bias:
            self.b = _param(np.zeros(d_out))
        else:
            self.b = None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add_bias(y, self.b, 1)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, zero=False, gain=1.0):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.standard_normal((c_out, c_in, k, k)) * gain / math.sqrt(c_in * k * k)
        self.w = _param(w)
        self.b = _param(np.zeros(c_out))

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    """Normalize channel groups of a [C, H, W] map, then per-channel affine."""

    def __init__(self, channels, groups=4):
        self.groups = groups if channels % groups == 0 else 1
        self.g = _param(np.ones(channels))
        self.b = _param(np.zeros(channels))

    def __call__(self, x):
        y = T.reshape(T.layer_norm_rows(T.reshape(x, (self.groups, -1))), x.shape)
        return T.add_bias(T.mul_along(y, self.g, 0), self.b, 0)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of an integer step as a [1 x dim] tensor."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)])[None, :])


class ResBlock(Module):
    def __init__(self, c_in, c_out, t_dim, rng):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.norm2 = GroupNorm(c_out)
        self.temb = Linear(t_dim, c_out, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, gain=0.5)
        if c_in != c_out:
            self.skip = Conv2d(c_in, c_out, 1, rng)
        else:
            self.skip = None

    def __call__(self, x, temb):
        h = self.conv1(T.silu(self.norm1(x)))
        shift = T.reshape(self.temb(temb), (h.shape[0],))
        h = T.add_bias(h, shift, 0)
        h = self.conv2(T.silu(self.norm2(h)))
        base = x if self.skip is None else self.skip(x)
        return T.add(base, h)


def attend(q, k, v, heads, bias=None):
    """Multi-head scaled dot-product attention on token matrices.

    Returns the output rows and the head-averaged attention map.  ``bias``
    is added to every head's logits before the softmax.
    """
    d = q.shape[1]
    dh = d // heads
    outs, maps = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.cols(q, lo, hi) if heads > 1 else q
        kh = T.cols(k, lo, hi) if heads > 1 else k
        vh = T.cols(v, lo, hi) if heads > 1 else v
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
        m = T.softmax_rows(logits, bias)
        maps.append(m)
        outs.append(T.matmul(m, vh))
    if heads == 1:
        return outs[0], maps[0]
    avg = maps[0]
    for m in maps[1:]:
        avg = T.add(avg, m)
    return T.concat(outs, axis=1), T.scale(avg, 1.0 / heads)


class SelfAttention(Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.out = Linear(dim, dim, rng, std=0.5 / math.sqrt(dim))

    def __call__(self, x):
        o, m = attend(self.q(x), self.k(x), self.v(x), self.heads)
        return self.out(o), m


class CrossAttention(Module):
    """Queries from image tokens, keys and values from text embeddings."""

    def __init__(self, dim, ctx_dim, heads, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(ctx_dim, dim, rng, bias=False)
        self.v = Linear(ctx_dim, dim, rng, bias=False)
        self.out = Linear(dim, dim, rng, std=0.5 / math.sqrt(dim))

    def __call__(self, x, ctx, bias=None):
        o, m = attend(self.q(x), self.k(ctx), self.v(ctx), self.heads, bias)
        return self.out(o), m


class TransformerBlock(Module):
    """Pre-norm self-attention, cross-attention and feed-forward on a [C, r, r] map."""

    def __init__(self, dim, ctx_dim, heads, rng):
        self.attn1 = SelfAttention(dim, heads, rng)
        self.attn2 = CrossAttention(dim, ctx_dim, heads, rng)
        self.ff1 = Linear(dim, 2 * dim, rng)
        self.ff2 = Linear(2 * dim, dim, rng, std=0.5 / math.sqrt(2 * dim))

    def __call__(self, x, ctx, cross_bias=None, record=None, tag=""):
        c, h, w = x.shape
        tok = T.transpose(T.reshape(x, (c, h * w)))
        a, self_map = self.attn1(T.layer_norm_rows(tok))
        tok = T.add(tok, a)
        bias = cross_bias(h * w, ctx.shape[0]) if cross_bias is not None else None
        a, cross_map = self.attn2(T.layer_norm_rows(tok), ctx, bias)
        tok = T.add(tok, a)
        tok = T.add(tok, self.ff2(T.silu(self.ff1(T.layer_norm_rows(tok)))))
        if record is not None:
            record.setdefault("self", []).append((h, self_map))
            record.setdefault("cross", []).append((tag, cross_map))
        return T.reshape(T.transpose(tok), (c, h, w))
