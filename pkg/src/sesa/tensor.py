"""A small dense-tensor engine with reverse-mode gradients.

Values are float64 numpy arrays.  Elementwise ops require identical shapes
(a python scalar is the only thing that broadcasts); every other shape change
is an explicit op.  Each op that sees a ``requires_grad`` input records a
closure that maps the output gradient to input gradients, and ``backward``
replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagic, Corrupt, NonFiniteInput, NotScalar, ShapeMismatch, VersionMismatch

__all__ = [
    "Tensor", "tensor", "zeros", "ones", "randn", "make_rng", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "reshape", "permute",
    "softmax_rows", "conv2d", "maxpool2d", "avgpool2d", "upsample_nearest", "silu", "relu", "tanh",
    "square", "sum", "mean", "add_bias", "mul_along", "layer_norm_rows", "normalize_rows", "cols", "concat", "stack", "index",
    "backward", "save_tensors", "load_tensors", "FORMAT_VERSION",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def make_rng(seed):
    """Deterministic generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeMismatch("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def randn(shape, rng, std=1.0, requires_grad=False):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    """Wrap ``data``; attach the graph edge only if some parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _result(a.data + float(b), (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(_as_tensor(a), b)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def silu(a):
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _result(ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------- reductions

def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    n = a.size
    shape = a.shape
    return _result(np.array(a.data.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- shapes

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = -int(np.prod(shape))
        if known and a.size % known == 0:
            shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def cols(a, start, stop):
    """Column slice ``a[:, start:stop]`` of a matrix."""
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeMismatch(f"bad column range {start}:{stop} for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), back)


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeMismatch(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors):
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    n = len(tensors)
    return _result(np.stack([t.data for t in tensors]), tensors, lambda g: tuple(g[i] for i in range(n)))


def index(a, i):
    """The ``i``-th slice along the leading axis."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _result(a.data[i].copy(), (a,), back)


def add_bias(x, b, axis):
    """Add vector ``b`` along ``axis`` of ``x`` (the one explicit broadcast)."""
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeMismatch(f"bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


def mul_along(x, v, axis):
    """Multiply ``x`` by vector ``v`` along ``axis``."""
    if v.ndim != 1 or x.shape[axis] != v.shape[0]:
        raise ShapeMismatch(f"scale vector {v.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    vv = v.data.reshape(view)
    xd = x.data
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _result(xd * vv, (x, v), lambda g: (g * vv, (g * xd).sum(axis=others)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), back)


def softmax_rows(logits, bias=None):
    """Row-wise softmax of ``logits + bias``.

    The bias is shifted so each of its rows has minimum zero before it is
    added.  Softmax ignores per-row constants, so this changes nothing
    mathematically, but a constant bias row then adds exact zeros and the
    result matches the unbiased output bit for bit.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteInput("softmax_rows received NaN or Inf logits")
    z = logits.data
    parents = (logits,)
    if bias is not None:
        if bias.shape != logits.shape:
            raise ShapeMismatch(f"bias {bias.shape} does not match logits {logits.shape}")
        if not np.all(np.isfinite(bias.data)):
            raise NonFiniteInput("softmax_rows received NaN or Inf bias")
        bd = bias.data
        z = z + (bd - bd.min(axis=1, keepdims=True))
        parents = (logits, bias)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        gz = y * (g - (g * y).sum(axis=1, keepdims=True))
        return (gz, gz) if len(parents) == 2 else (gz,)

    return _result(y, parents, back)


def normalize_rows(a):
    """Divide each row of a nonnegative matrix by its sum."""
    if a.ndim != 2:
        raise ShapeMismatch(f"normalize_rows expects a matrix, got {a.shape}")
    s = a.data.sum(axis=1, keepdims=True)
    y = a.data / s

    def back(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) / s,)

    return _result(y, (a,), back)


def layer_norm_rows(a, eps=1e-5):
    """Normalize each row of a matrix to zero mean, unit variance (no affine)."""
    if a.ndim != 2:
        raise ShapeMismatch(f"layer_norm_rows expects a matrix, got {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (a,), back)


# ---------------------------------------------------------------- spatial

def _out_extent(n, k, stride, padding, op):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeMismatch(f"{op}: extent {n} with window {k}, stride {stride}, padding {padding} "
                            "does not tile evenly")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` [C_in, H, W] with ``w`` [C_out, C_in, kh, kw]."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    c_out, c_in, kh, kw = w.shape
    _, h, wd = x.shape
    ho = _out_extent(h, kh, stride, padding, "conv2d")
    wo = _out_extent(wd, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(w.data, win, axes=([1, 2, 3], [0, 3, 4]))
    parents = (x, w)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeMismatch(f"conv2d bias {b.shape} for {c_out} output channels")
        out = out + b.data[:, None, None]
        parents = (x, w, b)
    wd_ = w.data

    def back(g):
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                        wd_[:, :, i, j], g, axes=([0], [0]))
            gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _result(out, parents, back)


def maxpool2d(x, window, stride=None):
    """Max over ``window`` x ``window`` patches of the last two axes.

    Gradient goes to the first maximal element of each patch in row-major
    order.
    """
    stride = window if stride is None else stride
    if x.ndim < 2:
        raise ShapeMismatch(f"maxpool2d needs at least two axes, got {x.shape}")
    *lead, h, w = x.shape
    ho = _out_extent(h, window, stride, 0, "maxpool2d")
    wo = _out_extent(w, window, stride, 0, "maxpool2d")
    win = sliding_window_view(x.data, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(*lead, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        rows = np.arange(ho)[:, None] * stride + arg // window
        colsi = np.arange(wo)[None, :] * stride + arg % window
        gx2 = gx.reshape(-1, h, w)
        g2 = g.reshape(-1, ho, wo)
        r2 = rows.reshape(-1, ho, wo)
        c2 = colsi.reshape(-1, ho, wo)
        lead_idx = np.broadcast_to(np.arange(gx2.shape[0])[:, None, None], r2.shape)
        np.add.at(gx2, (lead_idx, r2, c2), g2)
        return (gx,)

    return _result(out, (x,), back)


def avgpool2d(x, factor):
    """Non-overlapping mean pooling of the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeMismatch(f"avgpool2d: {x.shape} not divisible by {factor}")
    out = x.data.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))

    def back(g):
        return (np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1) / (factor * factor),)

    return _result(out, (x,), back)


def upsample_nearest(x, factor):
    """Repeat every pixel of the last two axes ``factor`` times."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    *lead, h, w = x.shape

    def back(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _result(out, (x,), back)


# ---------------------------------------------------------------- autograd

def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` lists leaves the caller cares about; those the loss does not
    reach get a zero gradient instead of staying ``None``.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads = {id(loss): np.ones(loss.shape)}
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros(p.shape)


# ---------------------------------------------------------------- serialization

MAGIC = b"SESA"
FORMAT_VERSION = 1


def save_tensors(path, named):
    """Write ``{name: Tensor | ndarray}`` to the named-tensor container.

    Layout (all little-endian): magic ``SESA``, u32 version, then per tensor
    u32 name length, UTF-8 name, u32 rank, rank x u64 extents, float64 data.
    """
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path):
    """Read a container written by :func:`save_tensors` into ``{name: ndarray}``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a tensor container (magic {buf[:4]!r})")
    if len(buf) < 8:
        raise Corrupt(len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 8
    out = {}

    def need(n):
        if pos + n > len(buf):
            raise Corrupt(pos)

    while pos < len(buf):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise Corrupt(pos, "undecodable tensor name") from None
        pos += nlen
        need(4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out
