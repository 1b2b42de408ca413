"""Differentiable primitives over :class:`Tensor`.

Each function computes its forward result with numpy and registers a closure
returning input gradients.  Broadcasting follows numpy's trailing-dimension
rule; gradients are summed back to each input's shape.
"""

from __future__ import annotations

import math
from numbers import Number

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .tensor import Tensor, make_op

EXP_CLAMP = 40.0


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {' and '.join(map(str, shapes))} do not broadcast") from exc


# --------------------------------------------------------------- binary ops
def _binary(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    if not isinstance(exponent, Number):
        raise TypeError("only scalar exponents are supported")
    out = a.data**exponent
    return make_op(
        out,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "power",
    )


# ---------------------------------------------------------------- unary ops
def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    # inputs above EXP_CLAMP saturate; the gradient there is zero
    clipped = np.minimum(a.data, EXP_CLAMP)
    out = np.exp(clipped)
    return make_op(out, (a,), lambda g: (g * out * (a.data <= EXP_CLAMP),), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    big = x > EXP_CLAMP
    out = np.where(big, x, np.log1p(np.exp(np.minimum(x, EXP_CLAMP))))
    return make_op(out, (a,), lambda g: (g * expit(x),), "softplus")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = a.data * s
    return make_op(out, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_op(out, (a,), backward, "gelu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "silu": silu,
    "gelu": gelu,
    "tanh": tanh,
    "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](_lift(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# --------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum(a, axes, keepdims) * (1.0 / count)


# ----------------------------------------------------------- shape handling
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape", check_finite=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_op(out, (a,), lambda g: (g.transpose(inv),), "transpose", check_finite=False)


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in index)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.asarray(out), (a,), backward, "getitem", check_finite=False)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, tensors, backward, "concat", check_finite=False)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op(out, tensors, backward, "stack", check_finite=False)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is a per-axis list of (before, after)."""
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_op(out, (a,), lambda g: (g[index],), "pad", check_finite=False)


def roll(a: Tensor, shift, axis) -> Tensor:
    out = np.roll(a.data, shift, axis)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return make_op(out, (a,), lambda g: (np.roll(g, neg_shift, axis),), "roll", check_finite=False)


def permute_axis(a: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder entries along ``axis`` by a permutation index array."""
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = np.take(a.data, perm, axis=axis)
    return make_op(out, (a,), lambda g: (np.take(g, inv, axis=axis),), "permute_axis", check_finite=False)


def split(a: Tensor, sizes, axis: int = -1) -> list[Tensor]:
    axis = axis % a.ndim
    outs, start = [], 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        outs.append(getitem(a, tuple(index)))
        start += n
    return outs


# ------------------------------------------------------------------ linear
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = a.data @ b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out.reshape(*lead, w.shape[1]), parents, backward, "linear")


# ------------------------------------------------------------- convolution
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 2D cross-correlation with zero padding.

    x is (B, C, H, W); w is (O, C // groups, kh, kw).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weight")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    G = groups
    if C % G or O % G:
        raise ShapeError(f"channels {C} and outputs {O} must be divisible by groups={G}")
    if Cg != C // G:
        raise ShapeError(f"weight expects {Cg * G} input channels, got {C}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    Og = O // G

    def window(i, j):
        return xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]

    depthwise = Cg == 1 and Og == 1
    if depthwise:
        out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.data, w.data))
        for i in range(kh):
            for j in range(kw):
                out += window(i, j) * w.data[None, :, 0, i, j, None, None]
        cols = None
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
        K = Cg * kh * kw
        cols = (
            win.reshape(B, G, Cg, Ho, Wo, kh, kw)
            .transpose(0, 1, 3, 4, 2, 5, 6)
            .reshape(B, G, Ho * Wo, K)
        )
        wm = w.data.reshape(G, Og, K).transpose(0, 2, 1)
        out = (cols @ wm).transpose(0, 1, 3, 2).reshape(B, O, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    if w.requires_grad:
                        gw[:, 0, i, j] = (g * window(i, j)).sum(axis=(0, 2, 3))
                    if gxp is not None:
                        gxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += (
                            g * w.data[None, :, 0, i, j, None, None]
                        )
        else:
            K = Cg * kh * kw
            g2 = g.reshape(B, G, Og, Ho * Wo).transpose(0, 1, 3, 2)
            gw = None
            if w.requires_grad:
                ct = cols.transpose(1, 0, 2, 3).reshape(G, B * Ho * Wo, K)
                gt = g2.transpose(1, 0, 2, 3).reshape(G, B * Ho * Wo, Og)
                gw = (np.swapaxes(ct, 1, 2) @ gt).transpose(0, 2, 1).reshape(O, Cg, kh, kw)
            if gxp is not None:
                wm = w.data.reshape(G, Og, K)
                gcols = (g2 @ wm).reshape(B, G, Ho, Wo, Cg, kh, kw)
                gcols = gcols.transpose(0, 1, 4, 2, 3, 5, 6).reshape(B, C, Ho, Wo, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += gcols[
                            ..., i, j
                        ]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_op(out, parents, backward, "conv2d")


def conv_transpose2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with a 2x2 kernel and stride 2; w is (Cin, Cout, 2, 2)."""
    B, C, H, W = x.shape
    if w.shape[0] != C or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2 weight {w.shape} incompatible with input {x.shape}")
    O = w.shape[1]
    xl = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wm = w.data.reshape(C, O * 4)
    out = (xl @ wm).reshape(B, H, W, O, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(B, O, 2 * H, 2 * W)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g6 = g.reshape(B, O, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, O * 4)
        gx = (g6 @ wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xl.T @ g6).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_op(out, parents, backward, "conv_transpose2")


# ---------------------------------------------------------- normalization
def layer_norm(x: Tensor, normalized_shape, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing ``normalized_shape`` extents, then apply the affine map."""
    if isinstance(normalized_shape, int):
        normalized_shape = (normalized_shape,)
    normalized_shape = tuple(normalized_shape)
    k = len(normalized_shape)
    if k == 0 or int(np.prod(normalized_shape)) == 0:
        raise ShapeError("layer_norm over an empty slice")
    if x.shape[-k:] != normalized_shape:
        raise ShapeError(f"{normalized_shape} is not a suffix of input shape {x.shape}")
    axes = tuple(range(x.ndim - k, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)
    lead = tuple(range(x.ndim - k))

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        grads = []
        if x.requires_grad:
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
            grads.append(rstd * (gxhat - m1 - xhat * m2))
        else:
            grads.append(None)
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_op(out, parents, backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward, "log_softmax")


# --------------------------------------------------------------- resampling
def avg_pool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"downsampling needs even extents, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_op(out, (x,), backward, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward, "upsample_nearest2", check_finite=False)


RESAMPLE_MODES = ("downsample-stride2", "upsample-nearest2", "transposed-conv2")


def resample(x: Tensor, mode: str, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Halve or double the spatial extents without changing channels.

    ``downsample-stride2`` averages 2x2 blocks; ``transposed-conv2`` needs a
    (C, C, 2, 2) weight.
    """
    if mode == "downsample-stride2":
        return avg_pool2(x)
    if mode == "upsample-nearest2":
        return upsample_nearest2(x)
    if mode == "transposed-conv2":
        if weight is None:
            raise ValueError("transposed-conv2 needs a weight")
        if weight.shape[0] != weight.shape[1]:
            raise ShapeError("resample keeps channels; use conv_transpose2 to change them")
        return conv_transpose2(x, weight, bias)
    raise ValueError(f"unknown resample mode {mode!r}")
