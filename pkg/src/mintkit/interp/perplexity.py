from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .. import tensor as T
from ..model.ids import MaskSet
from ..model.network import MiniModel, PatchValue
from ..synthdocs.batching import Batch, collate
from ..synthdocs.generate import Example
from ..tensor.autograd import ParameterError
from ..tensor.ops import log_softmax_array

Data = Union[Batch, Sequence[Example]]
CHUNK = 256


def as_batch(data: Data) -> Batch:
    if isinstance(data, Batch):
        return data
    if len(data) == 0:
        raise ParameterError("empty example set")
    return collate(list(data))


def _slice_patches(patches: Mapping[str, PatchValue], lo: int, hi: int, n: int) -> dict[str, PatchValue]:
    out = {}
    for k, v in patches.items():
        if callable(v) or hi - lo == n:
            out[k] = v
        else:
            out[k] = np.asarray(v)[lo:hi]
    return out


@dataclass
class TokenNLL:
    """Per-example summed negative log-likelihood over loss positions."""

    nll: np.ndarray  # (N,)
    count: np.ndarray  # (N,)

    @property
    def perplexity(self) -> float:
        total = float(self.count.sum())
        if total == 0:
            raise ParameterError("no loss positions")
        return math.exp(float(self.nll.sum()) / total)

    def per_example_perplexity(self) -> np.ndarray:
        return np.exp(self.nll / np.maximum(self.count, 1))


def token_nll(
    model: MiniModel,
    data: Data,
    masks: Optional[MaskSet] = None,
    patches: Optional[Mapping[str, PatchValue]] = None,
    chunk: int = CHUNK,
) -> TokenNLL:
    """Teacher-forced NLL. Array patches are sliced along the batch axis per chunk."""
    b = as_batch(data)
    n = len(b)
    if n == 0:
        raise ParameterError("empty example set")
    patches = dict(patches or {})
    nll = np.zeros(n)
    cnt = b.loss_mask.sum(axis=1).astype(np.float64)
    with T.no_grad():
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            enc = model.encode(b.grids[lo:hi])
            logits, _ = model.decode(enc, b.inputs[lo:hi], masks, patches=_slice_patches(patches, lo, hi, n))
            logp = log_softmax_array(logits.data, -1)
            picked = np.take_along_axis(logp, b.targets[lo:hi, :, None], axis=-1)[..., 0]
            nll[lo:hi] = -(picked * b.loss_mask[lo:hi]).sum(axis=1)
    return TokenNLL(nll, cnt)


def perplexity_teacher_forced(
    model: MiniModel,
    data: Data,
    masks: Optional[MaskSet] = None,
    patches: Optional[Mapping[str, PatchValue]] = None,
) -> float:
    """``exp`` of the mean cross-entropy over all loss positions of ``data``."""
    if not isinstance(data, Batch) and len(data) == 0:
        raise ParameterError("perplexity of an empty subset")
    return token_nll(model, data, masks, patches).perplexity


def teacher_forced_exact(model: MiniModel, data: Data, masks: Optional[MaskSet] = None, chunk: int = CHUNK) -> np.ndarray:
    """Per example: every loss position's argmax equals the target.

    For greedy decoding this is the same event as an exact-match generation,
    because the first wrong argmax is exactly where greedy output diverges.
    """
    b = as_batch(data)
    ok = np.zeros(len(b), dtype=bool)
    with T.no_grad():
        for lo in range(0, len(b), chunk):
            hi = min(len(b), lo + chunk)
            logits, _ = model.decode(model.encode(b.grids[lo:hi]), b.inputs[lo:hi], masks)
            hit = (logits.data.argmax(-1) == b.targets[lo:hi]) | ~b.loss_mask[lo:hi]
            ok[lo:hi] = hit.all(axis=1)
    return ok
