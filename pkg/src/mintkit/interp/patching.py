"""Three-run activation patching (clean, corrupt, patched)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import tensor as T
from ..model.ids import MaskSet, parse_site
from ..model.network import MiniModel, PatchError
from ..synthdocs.batching import Batch, collate
from ..synthdocs.generate import Example
from ..synthdocs.vocab import detokenize
from .perplexity import as_batch, token_nll

SOURCES = ("zero", "mean", "corrupt", "tensor")
MEAN_REFERENCE_SIZE = 64


def token_axis(site: str) -> Optional[int]:
    """Axis indexing decoder positions at ``site`` (``None`` for cross-attention keys/values)."""
    sid, what = parse_site(site)
    if what in ("query", "attn", "av"):
        return 2
    if what in ("key", "value"):
        return 2 if sid.kind == "S" else None
    return 1


@dataclass(frozen=True)
class PatchSpec:
    """Where and what to write.

    ``positions`` restricts the overwrite to those decoder positions (all
    positions when ``None``). ``direction`` is ``noising`` (corrupt activation
    into the clean run) or ``denoising`` (clean activation into the corrupt run).
    """

    site: str
    source: str = "corrupt"
    positions: Optional[tuple[int, ...]] = None
    value: Optional[np.ndarray] = field(default=None, compare=False)
    direction: str = "noising"

    def __post_init__(self):
        parse_site(self.site)
        if self.source not in SOURCES:
            raise PatchError(f"unknown patch source {self.source!r}")
        if self.direction not in ("noising", "denoising"):
            raise PatchError(f"unknown patch direction {self.direction!r}")
        if self.source == "tensor" and self.value is None:
            raise PatchError(f"patch at {self.site}: source 'tensor' needs a value")


def overwrite(site: str, source: np.ndarray, positions: Optional[Sequence[int]] = None) -> Callable[[np.ndarray], np.ndarray]:
    """Patch callable copying ``source`` into the natural activation.

    ``source`` has the activation's rank; size-1 axes broadcast (a mean
    vector, a zero). Along the position axis only the overlapping prefix is
    copied, so the callable keeps working while generation grows the sequence.
    """
    ax = token_axis(site)
    src = np.asarray(source, dtype=np.float64)

    def fn(natural: np.ndarray) -> np.ndarray:
        if src.ndim != natural.ndim:
            raise PatchError(f"patch for site {site}: source rank {src.ndim} != activation rank {natural.ndim}")
        out = natural.copy()
        if ax is None:
            if positions is not None:
                raise PatchError(f"site {site} has no decoder-position axis")
            sel_out, sel_src = slice(None), slice(None)
        else:
            n = natural.shape[ax] if src.shape[ax] == 1 else min(natural.shape[ax], src.shape[ax])
            sel_out = np.array([p for p in (range(n) if positions is None else positions) if p < n], dtype=np.int64)
            if sel_out.size == 0:
                return out
            sel_src = sel_out if src.shape[ax] > 1 else np.zeros_like(sel_out)
        idx_out = [slice(None)] * natural.ndim
        idx_src = [slice(None)] * natural.ndim
        if ax is not None:
            idx_out[ax], idx_src[ax] = sel_out, sel_src
        try:
            out[tuple(idx_out)] = np.broadcast_to(src[tuple(idx_src)], out[tuple(idx_out)].shape)
        except ValueError:
            raise PatchError(f"patch for site {site}: source {src.shape} does not fit activation {natural.shape}") from None
        return out

    return fn


def capture(model: MiniModel, batch: Batch, sites: Sequence[str], masks: Optional[MaskSet] = None, patches=None) -> dict[str, np.ndarray]:
    with T.no_grad():
        _, trace = model.decode(model.encode(batch.grids), batch.inputs, masks, capture=sites, patches=patches)
    return {s: trace[s] for s in sites}


def mean_activation(model: MiniModel, reference: Sequence[Example], site: str) -> np.ndarray:
    """Mean over samples and valid positions (kept as a length-1 position axis)."""
    if _what(site) == "attn":
        raise PatchError("mean-patching an attention map is not supported (rows have different supports)")
    b = collate(list(reference)[:MEAN_REFERENCE_SIZE])
    act = capture(model, b, [site])[site]
    ax = token_axis(site)
    if ax is None:
        return act.mean(axis=0, keepdims=True)
    valid = b.inputs != 0
    valid[:, 0] = True
    shape = [1] * act.ndim
    shape[0], shape[ax] = valid.shape
    w = valid.reshape(shape).astype(np.float64)
    num = (act * w).sum(axis=(0, ax), keepdims=True)
    return num / w.sum(axis=(0, ax), keepdims=True)


def _what(site: str) -> str:
    return parse_site(site)[1]


@dataclass
class RunOutcome:
    perplexity: float
    outputs: list[str]


@dataclass
class PatchExperiment:
    spec: PatchSpec
    clean: RunOutcome
    corrupt: RunOutcome
    patched: RunOutcome


def _prompts(batch: Batch) -> list[list[int]]:
    return [list(batch.inputs[i, : batch.prompt_lens[i]]) for i in range(len(batch))]


def _run(model, batch: Batch, masks, patches, max_new: int, gen_patches=None) -> RunOutcome:
    ppl = token_nll(model, batch, masks, patches).perplexity
    with T.no_grad():
        enc = model.encode(batch.grids).data
    gen = model.generate(enc, _prompts(batch), max_new, masks, gen_patches if gen_patches is not None else patches)
    return RunOutcome(ppl, [detokenize(g) for g in gen])


def _greedy_capture(model, batch: Batch, site: str, masks, max_new: int) -> np.ndarray:
    """Activations at ``site`` along the batch's own greedy trajectory (prompt plus continuation)."""
    prompts = _prompts(batch)
    with T.no_grad():
        enc = model.encode(batch.grids).data
        own = model.generate(enc, prompts, max_new, masks)
        width = max(len(p) + len(o) for p, o in zip(prompts, own))
        toks = np.zeros((len(prompts), width), dtype=np.int64)
        for i, (p, o) in enumerate(zip(prompts, own)):
            toks[i, : len(p) + len(o)] = p + o
        _, trace = model.decode(enc, toks, masks, capture=[site])
    return trace[site]


def activation_patch_experiment(
    model: MiniModel,
    clean,
    corrupt,
    spec: PatchSpec,
    masks: Optional[MaskSet] = None,
    reference: Optional[Sequence[Example]] = None,
    max_new: int = 8,
) -> PatchExperiment:
    """Clean, corrupt and patched runs.

    ``clean`` and ``corrupt`` are aligned example lists (or batches). The
    patched run uses the clean inputs for ``noising`` and the corrupt inputs
    for ``denoising``; perplexities are always measured against the targets of
    the run's own inputs.
    """
    cb, xb = as_batch(clean), as_batch(corrupt)
    if len(cb) != len(xb):
        raise PatchError(f"{len(cb)} clean vs {len(xb)} corrupt examples")
    ax = token_axis(spec.site)
    if ax is not None and spec.source == "corrupt" and not np.array_equal(cb.prompt_lens, xb.prompt_lens):
        raise PatchError(f"site {spec.site} is position-indexed but clean and corrupt prompts differ in length")
    base, donor = (cb, xb) if spec.direction == "noising" else (xb, cb)
    if spec.source == "zero":
        ndim = 3 if ax == 1 else 4
        fn = overwrite(spec.site, np.zeros((1,) * ndim), spec.positions)
    elif spec.source == "mean":
        if reference is None:
            raise PatchError("mean patching needs a reference set")
        fn = overwrite(spec.site, mean_activation(model, reference, spec.site), spec.positions)
    elif spec.source == "tensor":
        fn = overwrite(spec.site, spec.value, spec.positions)
    else:
        fn = overwrite(spec.site, capture(model, donor, [spec.site], masks)[spec.site], spec.positions)
    gen_fn = fn
    if spec.source == "corrupt" and ax is not None:
        # teacher-forced donor activations sit on the gold answer; generation follows the donor's own tokens
        gen_fn = overwrite(spec.site, _greedy_capture(model, donor, spec.site, masks, max_new), spec.positions)
    runs = {
        "clean": _run(model, cb, masks, None, max_new),
        "corrupt": _run(model, xb, masks, None, max_new),
    }
    patched = _run(model, base, masks, {spec.site: fn}, max_new, {spec.site: gen_fn})
    return PatchExperiment(spec, runs["clean"], runs["corrupt"], patched)
