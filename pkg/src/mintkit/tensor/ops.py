"""Differentiable operations on :class:`Tensor`.

Shapes are never broadcast implicitly. The only trailing-dimension affine
forms are ``linear`` (bias over the last axis) and ``layer_norm``; masks used
by ``apply_mask`` and ``softmax`` are constants and may broadcast.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .autograd import ContractError, DimensionError, ParameterError, Tensor, make_output

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_output("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_output("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_output("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return make_output("scale", a.data * c, (a,), lambda g: (g * c,))


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a`` (e.g. a head keep vector)."""
    m = np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(m.shape, a.shape)
    except ValueError:
        raise DimensionError(f"apply_mask: mask {m.shape} does not fit {a.shape}") from None
    return make_output("apply_mask", a.data * m, (a,), lambda g: (g * m,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_output("gelu", out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_output("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_output("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_output(
        "mean", np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make_output("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: incompatible ranks for shapes {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return make_output("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x[..., i] @ w[i, o] + b[o]``."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])  # one BLAS call instead of a batched loop
    out = (x2 @ wd).reshape(lead + (wd.shape[1],))
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("linear", out, inputs, bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; ids must lie in ``[0, rows)``."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"embedding: ids outside [0, {rows})")
    wshape = weight.shape

    def bw(g):
        gw = np.zeros(wshape)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return make_output("embedding", weight.data[idx], (weight,), bw)


# ---------------------------------------------------------------- normalisation


def softmax_array(x: np.ndarray, axis: int = -1, mask: Optional[np.ndarray] = None, scale: float = 1.0) -> np.ndarray:
    z = x * scale if scale != 1.0 else x.copy()
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None, scale: float = 1.0) -> Tensor:
    """Max-stabilised ``softmax(scale * x)``; ``mask`` (True = keep) is a constant boolean array."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ParameterError(f"softmax: axis {axis} invalid for shape {x.shape}")
    y = softmax_array(x.data, axis, mask, scale)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        if scale != 1.0:
            gy *= scale
        return (gy,)

    return make_output("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = log_softmax_array(x.data, axis)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_output("log_softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return make_output("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------- losses


def _row_weights(lead_shape: tuple[int, ...], mask) -> np.ndarray:
    if mask is None:
        w = np.ones(lead_shape)
    else:
        w = np.asarray(mask, dtype=np.float64)
        if w.shape != lead_shape:
            raise DimensionError(f"loss mask {w.shape} does not match positions {lead_shape}")
    n = w.sum()
    if n <= 0:
        raise ContractError("loss mask selects no positions")
    return w / n


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over (masked) positions of ``-log softmax(logits)[target]``."""
    tgt = np.asarray(targets, dtype=np.int64)
    lead, vocab = logits.shape[:-1], logits.shape[-1]
    if tgt.shape != lead:
        raise DimensionError(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    w = _row_weights(lead, mask)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        bad = tgt[(tgt < 0) | (tgt >= vocab)]
        raise IndexError(f"cross_entropy: target id {int(bad[0])} outside vocabulary of {vocab}")
    # masked-out positions may carry placeholder ids; clamp them for gathering only
    safe = np.where(w > 0, tgt, 0)
    logp = log_softmax_array(logits.data, -1)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum()

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
        return (grad * (w * g)[..., None],)

    return make_output("cross_entropy", np.asarray(loss), (logits,), bw)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float, mask=None) -> Tensor:
    """Row-mean of ``KL(softmax(p/T) || softmax(q/T))``."""
    if not temperature > 0:
        raise ParameterError(f"kl_divergence: temperature must be positive, got {temperature}")
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    _same_shape("kl_divergence", p_logits, q_logits)
    t = float(temperature)
    w = _row_weights(p_logits.shape[:-1], mask)
    logp = log_softmax_array(p_logits.data / t)
    logq = log_softmax_array(q_logits.data / t)
    p = np.exp(logp)
    row = (p * (logp - logq)).sum(axis=-1)
    loss = max(float((row * w).sum()), 0.0)

    def bw(g):
        ww = (w * g)[..., None]
        gq = (np.exp(logq) - p) / t * ww
        gp = p * ((logp - logq) - row[..., None]) / t * ww
        return (gp, gq)

    return make_output("kl_divergence", np.asarray(loss), (p_logits, q_logits), bw)
