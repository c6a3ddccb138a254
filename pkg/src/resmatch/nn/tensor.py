"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float32/float64 numpy array, an optional gradient
buffer, and a tape entry (parents + vector-Jacobian rule).  Every rule is
written in terms of these same tensor ops, so running ``backward`` with
``create_graph=True`` yields gradients that are themselves differentiable.
That second-order path is what gradient penalties on the discriminator
need (the penalty differentiates the gradient of the score w.r.t. the
input image).

Storage follows the array's dtype: float32 by default, float64 when the
caller asks for it (gradient checks do).  Reductions accumulate in 64-bit
regardless of storage dtype.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from ..errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = mode
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.name = name

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def astensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


# -- backward machinery ------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def _backprop(root: Tensor, seed: Tensor, create_graph: bool) -> dict[int, Tensor]:
    order = _toposort(root)
    grads: dict[int, Tensor] = {id(root): seed}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return grads


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    seed = Tensor(np.ones_like(loss.data))
    grads = _backprop(loss, seed, create_graph)
    order = _toposort(loss)
    for node in order:
        if node.requires_grad and node._vjp is None:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g if node.grad is None else add(node.grad, g)


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Functional gradients of a scalar output, without touching ``.grad``."""
    if output.data.size != 1:
        raise ShapeError(f"grad requires a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones_like(output.data))
    grads = _backprop(output, seed, create_graph)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


# -- broadcasting helpers ------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (have, want) in enumerate(zip(g.shape, shape)) if want == 1 and have != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, like=a)
    data = a.data + b.data

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, like=a)
    data = a.data - b.data

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, like=a)
    data = a.data * b.data

    def vjp(g: Tensor):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, like=a)
    data = a.data / b.data

    def vjp(g: Tensor):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = astensor(a)

    def vjp(g: Tensor):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def power(a, exponent: float) -> Tensor:
    a = astensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power expects a python scalar exponent")
    c = float(exponent)
    data = a.data**c

    def vjp(g: Tensor):
        return (mul(g, mul(c, power(a, c - 1.0))),)

    return _make(data, (a,), vjp)


def exp(a) -> Tensor:
    a = astensor(a)
    out = _make(np.exp(a.data), (a,), None)

    def vjp(g: Tensor):
        return (mul(g, out),)

    out._vjp = vjp if out._parents else None
    return out


def log(a) -> Tensor:
    a = astensor(a)
    data = np.log(a.data)

    def vjp(g: Tensor):
        return (div(g, a),)

    return _make(data, (a,), vjp)


def absolute(a) -> Tensor:
    a = astensor(a)
    sign = Tensor(np.sign(a.data))

    def vjp(g: Tensor):
        return (mul(g, sign),)

    return _make(np.abs(a.data), (a,), vjp)


def tanh(a) -> Tensor:
    a = astensor(a)
    data = np.tanh(a.data)
    out = _make(data, (a,), None)

    def vjp(g: Tensor):
        return (mul(g, sub(1.0, mul(out, out))),)

    out._vjp = vjp if out._parents else None
    return out


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)
    out = _make(data, (a,), None)

    def vjp(g: Tensor):
        return (mul(g, mul(out, sub(1.0, out))),)

    out._vjp = vjp if out._parents else None
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = astensor(a)
    x = a.data
    data = (np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)).astype(x.dtype)

    def vjp(g: Tensor):
        return (mul(g, sigmoid(a)),)

    return _make(data, (a,), vjp)


def relu(a) -> Tensor:
    a = astensor(a)
    mask = Tensor((a.data > 0).astype(a.data.dtype))

    def vjp(g: Tensor):
        return (mul(g, mask),)

    return _make(a.data * mask.data, (a,), vjp)


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = astensor(a)
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)
    slope_t = Tensor(slope)

    def vjp(g: Tensor):
        return (mul(g, slope_t),)

    return _make(a.data * slope, (a,), vjp)


# -- reductions, shape ops -----------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    data = data.astype(a.data.dtype)
    in_shape = a.shape

    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g: Tensor):
        gg = g
        if not keepdims and a.ndim:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
            gg = reshape(gg, kshape)
        return (broadcast_to(gg, in_shape),)

    return _make(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis % a.ndim]
    else:
        n = 1
        for ax in axis:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = np.broadcast_to(a.data, shape).copy()

    def vjp(g: Tensor):
        return (_unbroadcast(g, a.shape),)

    return _make(data, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    in_shape = a.shape

    def vjp(g: Tensor):
        return (reshape(g, in_shape),)

    return _make(data, (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def vjp(g: Tensor):
        return (transpose(g, inv),)

    return _make(data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g: Tensor):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(data, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Tensor):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            outs.append(narrow(g, axis, int(lo), int(hi)))
        return tuple(outs)

    return _make(data, tuple(tensors), vjp)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis; gradient scatters back with zero fill."""
    a = astensor(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()
    in_shape = a.shape

    def vjp(g: Tensor):
        return (pad_zeros(g, axis, start, in_shape[axis] - stop),)

    return _make(data, (a,), vjp)


def pad_zeros(a, axis: int, before: int, after: int) -> Tensor:
    a = astensor(a)
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)

    def vjp(g: Tensor):
        return (narrow(g, axis, before, before + a.shape[axis]),)

    return _make(data, (a,), vjp)


# -- image-patch ops (convolution building blocks) -----------------------------


def _conv_geometry(h: int, w: int, kh: int, kw: int, sh: int, sw: int, pads: tuple[int, int, int, int]):
    pt, pb, pl, pr = pads
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"convolution output collapsed: input {h}x{w}, kernel {kh}x{kw}, stride {sh}x{sw}, pads {pads}")
    return oh, ow


def same_pads(h: int, w: int, kh: int, kw: int, sh: int, sw: int) -> tuple[int, int, int, int]:
    """'same' padding: output = ceil(input / stride); extra pixel goes after."""
    oh = -(-h // sh)
    ow = -(-w // sw)
    ph = max((oh - 1) * sh + kh - h, 0)
    pw = max((ow - 1) * sw + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def im2col(x, kh: int, kw: int, sh: int, sw: int, pads: tuple[int, int, int, int]) -> Tensor:
    """(B, C, H, W) -> (C*kh*kw, B*OH*OW) patch matrix (one copy, GEMM-ready)."""
    x = astensor(x)
    b, c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, kh, kw, sh, sw, pads)
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, b, oh, ow),
        strides=(s[1], s[2], s[3], s[0], s[2] * sh, s[3] * sw),
        writeable=False,
    )
    data = np.ascontiguousarray(windows).reshape(c * kh * kw, b * oh * ow)

    def vjp(g: Tensor):
        return (col2im(g, b, (h, w), kh, kw, sh, sw, pads),)

    return _make(data, (x,), vjp)


def col2im(cols, b: int, hw: tuple[int, int], kh: int, kw: int, sh: int, sw: int,
           pads: tuple[int, int, int, int]) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add (C*kh*kw, B*OH*OW) patches back."""
    cols = astensor(cols)
    h, w = hw
    oh, ow = _conv_geometry(h, w, kh, kw, sh, sw, pads)
    c = cols.shape[0] // (kh * kw)
    if cols.shape[0] != c * kh * kw or cols.shape[1] != b * oh * ow:
        raise ShapeError(f"col2im shape mismatch: cols {cols.shape} vs geometry c={c} k=({kh},{kw}) b={b} out=({oh},{ow})")
    pt, pb, pl, pr = pads
    xp = np.zeros((c, b, h + pt + pb, w + pl + pr), dtype=cols.data.dtype)
    patches = cols.data.reshape(c, kh, kw, b, oh, ow)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + sh * oh : sh, v : v + sw * ow : sw] += patches[:, u, v]
    data = np.ascontiguousarray(xp[:, :, pt : pt + h, pl : pl + w].transpose(1, 0, 2, 3))

    def vjp(g: Tensor):
        return (im2col(g, kh, kw, sh, sw, pads),)

    return _make(data, (cols,), vjp)


def conv2d(x, weight, bias=None, stride: int = 1, pads: tuple[int, int, int, int] = (0, 0, 0, 0)) -> Tensor:
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw) weights."""
    x = astensor(x)
    weight = astensor(weight, like=x)
    o, c, kh, kw = weight.shape
    b, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"conv2d channel mismatch: input has {cx}, weight expects {c}")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, stride, pads)
    cols = im2col(x, kh, kw, stride, stride, pads)                # (CK, B*L)
    wmat = reshape(weight, (o, c * kh * kw))
    y = matmul(wmat, cols)                                        # (O, B*L)
    y = transpose(reshape(y, (o, b, oh, ow)), (1, 0, 2, 3))
    if bias is not None:
        bias = astensor(bias, like=x)
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


def conv2d_transpose(x, weight, bias=None, stride: int = 1, pads: tuple[int, int, int, int] = (0, 0, 0, 0),
                     out_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of conv2d: (B,Cin,H,W) with weights (Cin,O,kh,kw) -> (B,O,OH,OW).

    ``out_hw`` disambiguates output sizes that stride would otherwise alias.
    """
    x = astensor(x)
    weight = astensor(weight, like=x)
    cin, o, kh, kw = weight.shape
    b, cx, h, w = x.shape
    if cx != cin:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {cx}, weight expects {cin}")
    if out_hw is None:
        out_hw = (h * stride, w * stride)
    oh_check, ow_check = _conv_geometry(out_hw[0], out_hw[1], kh, kw, stride, stride, pads)
    if (oh_check, ow_check) != (h, w):
        raise ShapeError(
            f"conv2d_transpose target {out_hw} inconsistent: forward conv would give {(oh_check, ow_check)}, input is {(h, w)}"
        )
    wmat = transpose(reshape(weight, (cin, o * kh * kw)))         # (OK, Cin)
    xmat = reshape(transpose(x, (1, 0, 2, 3)), (cin, b * h * w))
    cols = matmul(wmat, xmat)                                     # (OK, B*L)
    y = col2im(cols, b, out_hw, kh, kw, stride, stride, pads)
    if bias is not None:
        bias = astensor(bias, like=x)
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = astensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d needs dimensions divisible by {k}, got {h}x{w}")
    r = reshape(x, (b, c, h // k, k, w // k, k))
    return tmean(r, axis=(3, 5))


def global_avg_pool(x) -> Tensor:
    x = astensor(x)
    return tmean(x, axis=(2, 3))


def resize_nearest(x, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour spatial resize of (B,C,H,W); gradient scatter-adds."""
    x = astensor(x)
    b, c, h, w = x.shape
    oh, ow = out_hw
    iy = np.minimum((np.arange(oh) * h) // oh, h - 1)
    ix = np.minimum((np.arange(ow) * w) // ow, w - 1)
    data = np.ascontiguousarray(x.data[:, :, iy[:, None], ix[None, :]])

    def vjp(g: Tensor):
        return (_resize_nearest_adjoint(g, (h, w), iy, ix),)

    return _make(data, (x,), vjp)


def _resize_nearest_adjoint(g, in_hw: tuple[int, int], iy: np.ndarray, ix: np.ndarray) -> Tensor:
    g = astensor(g)
    b, c, oh, ow = g.shape
    h, w = in_hw
    out = np.zeros((b, c, h, w), dtype=g.data.dtype)
    flat = (iy[:, None] * w + ix[None, :]).ravel()
    np.add.at(out.reshape(b, c, h * w), (slice(None), slice(None), flat), g.data.reshape(b, c, oh * ow))

    def vjp(gg: Tensor):
        return (resize_nearest(gg, (oh, ow)),)

    out_t = _make(out, (g,), vjp)
    return out_t
