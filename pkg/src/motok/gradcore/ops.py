"""Differentiable primitives over Tensor, each with a registered backward rule.

Broadcasting is limited: elementwise binary ops accept equal shapes or shapes
that align under numpy's trailing-axis rule with size-1/missing leading axes;
gradients are summed back over broadcast axes. Nothing broader is supported.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


from .tensor import ShapeError, Tensor, _OPS, active_tape, as_tensor




# op name -> function, for introspection and the catalog-coverage test
PRIMITIVES: dict = {}


def _primitive(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        _OPS[name] = fn
        return fn
    return deco


def _make(data, inputs, backward, op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


@_primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


@_primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


@_primitive("multiply")
def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "multiply")


@_primitive("divide")
def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("divide", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(ad / bd, (a, b), backward, "divide")


@_primitive("scale")
def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward, "scale")


@_primitive("negate")
def negate(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward, "negate")


@_primitive("matmul")
def matmul(a, b) -> Tensor:
    """2-D matrix product, or stacked products when leading dims are equal."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} vs {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims must match exactly, {ad.shape} vs {bd.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), backward, "matmul")


@_primitive("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one operand")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: incompatible shapes {ref} and {s} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward, "concat")


@_primitive("slice")
def slice_(a, slices) -> Tensor:
    """Contiguous slicing; ``slices`` is a tuple of python slice objects."""
    a = as_tensor(a)
    if not isinstance(slices, tuple):
        slices = (slices,)
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[slices] = g
        return (full,)

    return _make(a.data[slices].copy(), (a,), backward, "slice")


@_primitive("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape).copy(), (a,), backward, "reshape")


@_primitive("transpose")
def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@_primitive("sum")
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    axis = _norm_axis(axis, ad.ndim)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, ad.shape).copy(),)

    return _make(ad.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


@_primitive("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    axis = _norm_axis(axis, ad.ndim)
    if axis is None:
        count = ad.size
    else:
        count = int(np.prod([ad.shape[ax] for ax in axis]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, ad.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, ad.shape).copy(),)

    return _make(ad.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


@_primitive("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return _make(np.where(positive, a.data, 0.0), (a,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


@_primitive("gelu")
def gelu(a) -> Tensor:
    """Tanh-form gelu; the backward rule is the exact derivative of this form."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu")


@_primitive("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), backward, "sigmoid")


@_primitive("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), backward, "tanh")


@_primitive("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)

    def backward(g):
        return (g * e,)

    return _make(e, (a,), backward, "exp")


@_primitive("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), backward, "log")


@_primitive("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / r,)

    return _make(r, (a,), backward, "sqrt")


@_primitive("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), backward, "softmax")


@_primitive("layer_norm")
def layer_norm(a, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with optional affine parameters."""
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    if gain is not None and gain.data.shape != (n,):
        raise ShapeError(f"layer_norm: gain shape {gain.data.shape} != ({n},)")
    if bias is not None and bias.data.shape != (n,):
        raise ShapeError(f"layer_norm: bias shape {bias.data.shape} != ({n},)")

    gd = gain.data if gain is not None else None
    inputs = [a] + [t for t in (gain, bias) if t is not None]

    def backward(g):
        gy = g * gd if gd is not None else g
        # d xhat / d x folded analytically
        s1 = gy.sum(axis=-1, keepdims=True)
        s2 = (gy * xhat).sum(axis=-1, keepdims=True)
        gx = inv * (gy - s1 / n - xhat * s2 / n)
        out = [gx]
        if gain is not None:
            axes = tuple(range(g.ndim - 1))
            out.append((g * xhat).sum(axis=axes))
        if bias is not None:
            axes = tuple(range(g.ndim - 1))
            out.append(g.sum(axis=axes))
        return tuple(out)

    y = xhat
    if gd is not None:
        y = y * gd
    if bias is not None:
        y = y + bias.data
    return _make(y, tuple(inputs), backward, "layer_norm")


@_primitive("embedding_lookup")
def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, D) by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")
    tshape = table.data.shape

    def backward(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


@_primitive("row_gather")
def row_gather(a, idx: np.ndarray) -> Tensor:
    """Pick one column per row: (N, V), (N,) -> (N,)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"row_gather: got {a.data.shape} with index shape {idx.shape}")
    rows = np.arange(a.data.shape[0])
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx].copy(), (a,), backward, "row_gather")


@_primitive("conv1d")
def conv1d(x, weight, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D convolution: (B, C, T) * (O, C, K) -> (B, O, T') with symmetric
    zero padding; T' = floor((T + 2p - K) / s) + 1."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input/weight, got {xd.shape} and {wd.shape}")
    B, C, T = xd.shape
    O, Cw, K = wd.shape
    if C != Cw:
        raise ShapeError(f"conv1d: channel mismatch, input {xd.shape} vs weight {wd.shape}")
    if bias is not None and bias.data.shape != (O,):
        raise ShapeError(f"conv1d: bias shape {bias.data.shape} != ({O},)")
    t_out = (T + 2 * padding - K) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: kernel {K} with stride {stride}, padding {padding} "
                         f"does not fit length {T}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)
    cols = windows[:, :, ::stride, :][:, :, :t_out, :]  # (B, C, T', K)
    out = np.einsum("bctk,ock->bot", cols, wd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]

    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        gw = np.einsum("bot,bctk->ock", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for k in range(K):
            contrib = np.einsum("bot,oc->bct", g, wd[:, :, k], optimize=True)
            gxp[:, :, k:k + span:stride] += contrib
        gx = gxp[:, :, padding:padding + T] if padding else gxp
        out_grads = [gx, gw]
        if bias is not None:
            out_grads.append(g.sum(axis=(0, 2)))
        return tuple(out_grads)

    return _make(out, tuple(inputs), backward, "conv1d")


@_primitive("upsample_nearest2")
def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbor temporal upsampling by 2x along the last axis."""
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(g.shape[:-1] + (-1, 2)).sum(axis=-1),)

    return _make(np.repeat(x.data, 2, axis=-1), (x,), backward, "upsample_nearest2")


@_primitive("add_mask")
def add_mask(x, mask: np.ndarray) -> Tensor:
    """Additive masking with a constant (broadcastable) pre-softmax mask."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    _check_broadcast("add_mask", x.data, mask)

    def backward(g):
        return (_unbroadcast(g, x.data.shape),)

    return _make(x.data + mask, (x,), backward, "add_mask")


@_primitive("stop_gradient")
def stop_gradient(x) -> Tensor:
    """Forward identity; contributes zero gradient to its input."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


@_primitive("straight_through")
def straight_through(z, z_hat) -> Tensor:
    """Forward value of ``z_hat`` with gradients routed unchanged to ``z``.

    Realized as z + sg(z_hat - z); the forward result is bit-identical to
    z_hat because the sum telescopes in exact arithmetic per element.
    """
    z, z_hat = as_tensor(z), as_tensor(z_hat)
    if z.data.shape != z_hat.data.shape:
        raise ShapeError(
            f"straight_through: shapes {z.data.shape} and {z_hat.data.shape} differ")

    def backward(g):
        return (g.copy(),)

    return _make(z_hat.data.copy(), (z,), backward, "straight_through")
