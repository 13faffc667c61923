"""Differentiable primitives.

Each function takes :class:`Tensor` inputs (plain numbers and arrays are
promoted to constant tensors of the partner's dtype) and returns a new
tensor.  Backward closures return one gradient per input, in input order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import _kernels as K
from .autograd import NumericOverflowError, ShapeError, Tensor, make_result


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")
    return a, b


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {', '.join(map(str, shapes))}") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    return make_result("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def where(cond: np.ndarray, x: Tensor, other) -> Tensor:
    """``cond ? x : other``; ``other`` is a constant and gets no gradient."""
    cond = np.asarray(cond, dtype=bool)
    other = np.asarray(other.data if isinstance(other, Tensor) else other, dtype=x.dtype)
    _broadcast_shape("where", cond.shape, x.shape, other.shape)
    out = np.where(cond, x.data, other)
    if out.shape != x.shape:
        raise ShapeError(f"where: condition {cond.shape} would broadcast input {x.shape} to {out.shape}")
    return make_result("where", out, (x,), lambda g: (np.where(cond, g, 0).astype(g.dtype),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_result("log", out, (x,), lambda g: (g / xd,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return make_result("swish", xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),))


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} has odd size {n} in shape {x.shape}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return make_result("glu", a * s, (x,), bw)


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    dt = xs[0].dtype
    if any(t.dtype != dt for t in xs):
        raise TypeError("concat: mixed dtypes")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in xs]} along axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_result("concat", out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    idx = np.where(index < 0, index + n, index)
    src = x.shape

    def bw(g):
        flat = g.reshape(idx.size, -1)
        acc = K.scatter_add_rows(flat, idx.reshape(-1), n)
        return (acc.reshape(src),)

    return make_result("gather_rows", x.data[idx], (x,), bw)


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def entropy(p: Tensor, axis: int = -1) -> Tensor:
    """Natural-log entropy with 0·log 0 = 0.

    The gradient at an exactly-zero probability is clipped to a large finite
    value rather than -inf.
    """
    pd = p.data
    tiny = np.finfo(pd.dtype).tiny
    logp = np.log(np.maximum(pd, tiny))
    out = -(np.where(pd > 0, pd * logp, 0)).sum(axis=axis)

    def bw(g):
        return (-np.expand_dims(g, axis) * (logp + 1),)

    return make_result("entropy", np.asarray(out), (p,), bw)


# -------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply a learned scale and shift."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with scale {weight.shape} and shift {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    with np.errstate(over="ignore", invalid="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.isfinite(var).all():
        # the output would be silently finite (x / inf), so report here
        raise NumericOverflowError(f"layer_norm: variance overflows for input {x.shape}")
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    w, b = weight.data, bias.data

    def bw(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return make_result("layer_norm", xhat * w + b, (x, weight, bias), bw)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes."""
    a, b = _pair(a, b, "cosine_similarity")
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: last axes differ, {a.shape} vs {b.shape}")
    _broadcast_shape("cosine_similarity", a.shape[:-1], b.shape[:-1])
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(-1, keepdims=True))
    dot = (ad * bd).sum(-1, keepdims=True)
    prod = na * nb
    clipped = prod < eps
    den = np.where(clipped, eps, prod)
    cos = dot / den

    def bw(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            da = bd / den - np.where(clipped, 0, cos * ad / np.maximum(na * na, eps * eps))
            ga = unbroadcast(g * da, ad.shape)
        if b.requires_grad:
            db = ad / den - np.where(clipped, 0, cos * bd / np.maximum(nb * nb, eps * eps))
            gb = unbroadcast(g * db, bd.shape)
        return ga, gb

    return make_result("cosine_similarity", cos[..., 0], (a, b), bw)


# --------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: tuple[int, int] = (2, 2)) -> Tensor:
    """2-D cross-correlation with "same" padding applied before striding.

    ``x`` is (batch, in_ch, H, W) and ``weight`` (out_ch, in_ch, kh, kw) with
    odd kernel sizes.  Output spatial sizes are ceil(H/sh) and ceil(W/sw).
    The left/top pad is always k//2, so the alignment of output frames does
    not depend on the input length.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    co, ci, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {co} output channels")
    sh, sw = stride
    B, _, H, W = x.shape
    Ho, Wo = -(-H // sh), -(-W // sw)
    cols = K.im2col(x.data, kh, kw, sh, sw, Ho, Wo)            # (B, Ho, Wo, ci*kh*kw)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T + bias.data                              # (B, Ho, Wo, co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)                             # (B, Ho, Wo, co)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gt.reshape(-1, co).T @ cols.reshape(-1, wmat.shape[1])).reshape(weight.shape)
        if bias.requires_grad:
            gb = gt.reshape(-1, co).sum(axis=0)
        if x.requires_grad:
            gcols = np.ascontiguousarray(gt @ wmat)
            gx = K.col2im(gcols, ci, H, W, kh, kw, sh, sw)
        return gx, gw, gb

    return make_result("conv2d", out, (x, weight, bias), bw)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with "same" zero padding.

    ``x`` is (batch, time, channels), ``weight`` (channels, k) with odd k.
    """
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[0] != x.shape[2]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with weight {weight.shape}")
    if weight.shape[1] % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size {weight.shape[1]} must be odd")
    if bias.shape != (x.shape[2],):
        raise ShapeError(f"depthwise_conv1d: bias {bias.shape} for {x.shape[2]} channels")
    xd, wd = x.data, weight.data
    out = K.depthwise_conv1d_forward(xd, wd) + bias.data

    def bw(g):
        gx, gw = K.depthwise_conv1d_backward(np.ascontiguousarray(g), xd, wd)
        gb = g.sum(axis=(0, 1)) if bias.requires_grad else None
        return gx, gw, gb

    return make_result("depthwise_conv1d", out, (x, weight, bias), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``p == 0`` or outside training."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability {p} outside [0, 1)")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "where": where,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "gather_rows": gather_rows,
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "swish": swish,
    "glu": glu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "entropy": entropy,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "depthwise_conv1d": depthwise_conv1d,
    "dropout": dropout,
    "cosine_similarity": cosine_similarity,
}


def apply_primitive(name: str, *inputs, **attrs) -> Tensor:
    """Look up a primitive by name and apply it."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}") from None
    return fn(*inputs, **attrs)
