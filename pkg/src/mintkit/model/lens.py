"""Logit lens for residual activations and for single cross-attention heads."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..tensor import Tensor
from ..tensor.autograd import DimensionError, ParameterError
from ..tensor.ops import softmax_array
from .ids import HeadId
from .network import MiniModel, _sub_prefix


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def logit_lens(model: MiniModel, activation) -> np.ndarray:
    """``softmax(activation @ U)`` over the vocabulary for every row of ``activation``."""
    a = _array(activation)
    if a.shape[-1] != model.config.d_model:
        raise DimensionError(f"logit_lens: last dimension {a.shape[-1]} != d_model={model.config.d_model}")
    return softmax_array(a @ model.unembedding_matrix(), axis=-1)


def head_write(model: MiniModel, head: HeadId, patch_enc) -> np.ndarray:
    """What ``head`` would add to the residual stream if it attended fully to each patch.

    This is ``enc @ Wv[:, head] (+ bv[head]) @ Wout[head, :]``; the shared output
    bias is left out because it does not belong to any one head.
    """
    sid = head.sublayer
    if sid.kind != "C":
        raise ParameterError(f"head_lens needs a cross-attention head, got {head}")
    arch = model.arch[sid]
    if not arch.present or head.head not in arch.heads:
        raise ParameterError(f"{head} is not present in this model")
    dh = model.config.d_head
    j = arch.heads.index(head.head)
    cols = slice(j * dh, (j + 1) * dh)
    p = model.params
    prefix = _sub_prefix(sid)
    enc = _array(patch_enc)
    v = enc @ p[f"{prefix}.v_proj.weight"].data[:, cols] + p[f"{prefix}.v_proj.bias"].data[cols]
    return v @ p[f"{prefix}.out_proj.weight"].data[cols, :]


def head_lens(model: MiniModel, head, patch_enc) -> np.ndarray:
    """Per-patch token distributions read through one head (or the sum over a set of heads)."""
    heads: Iterable[HeadId] = [head] if isinstance(head, HeadId) else list(head)
    heads = list(heads)
    if not heads:
        raise ParameterError("head_lens: empty head set")
    write = sum(head_write(model, h, patch_enc) for h in heads)
    return logit_lens(model, write)


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Natural-log entropy along the last axis (0·log 0 := 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)
