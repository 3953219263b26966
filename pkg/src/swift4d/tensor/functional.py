"""Differentiable primitives.

Elementwise binary ops follow numpy broadcasting; their backward sums the
incoming gradient back down to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return make_result(
        xd**exponent,
        (x,),
        lambda g: (g * exponent * xd ** (exponent - 1),),
        "pow",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    inner = _SQRT_2_OVER_PI * xd * (1.0 + _GELU_CUBIC * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward, "gelu")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    sig_neg = np.exp(out - xd)  # sigmoid(-x)
    return make_result(out, (x,), lambda g: (g * sig_neg,), "log_sigmoid")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------- linear alg
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``; leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch axes not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


# ------------------------------------------------------------- normalization
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs channels {x.shape[-1]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead_axes = tuple(range(xd.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ------------------------------------------------------------------ relayout
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (-1 not in shape and int(np.prod(shape)) != x.size) or (
        -1 in shape and (np.prod(known) == 0 or x.size % int(np.prod(known)))
    ):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axis order {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "permute",
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Circular shift; shifts are taken modulo each extent."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(a) for a in axes)
    if all(s % x.shape[a] == 0 for s, a in zip(shifts, axes)):
        return x
    back = tuple(-s for s in shifts)
    return make_result(
        np.roll(x.data, shifts, axis=axes),
        (x,),
        lambda g: (np.roll(g, back, axis=axes),),
        "roll",
    )


def pad_trailing(x: Tensor, pads) -> Tensor:
    """Zero-pad the end of each axis by ``pads[i]`` elements."""
    pads = tuple(int(p) for p in pads)
    if not any(pads):
        return x
    width = [(0, p) for p in pads]
    crop = tuple(slice(0, n) for n in x.shape)
    return make_result(np.pad(x.data, width), (x,), lambda g: (g[crop],), "pad")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")
