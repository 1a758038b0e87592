"""Physically remove sub-layers and heads from a copy of a model."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..model.ids import HeadId, MaskSet, SublayerId
from ..model.network import MiniModel, SublayerArch, _sub_prefix
from ..tensor import Tensor


class RecipeError(ValueError):
    pass


def surgery_sublayers(model: MiniModel, keep: Iterable) -> MiniModel:
    """Copy of ``model`` holding only the sub-layers in ``keep``."""
    keep_set = {s if isinstance(s, SublayerId) else SublayerId.parse(s) for s in keep}
    present = set(model.present_sublayers())
    unknown = keep_set - present
    if unknown:
        raise RecipeError(f"cannot keep absent sub-layers {sorted(map(str, unknown))}")
    if not keep_set:
        raise RecipeError("keep set is empty")
    if not any(s.kind == "C" for s in keep_set):
        raise RecipeError("a student must keep at least one cross-attention sub-layer")
    out = model.copy()
    for sid in present - keep_set:
        prefix = _sub_prefix(sid) + "."
        for name in [n for n in out.params if n.startswith(prefix)]:
            del out.params[name]
        out.arch[sid] = SublayerArch(False, ())
    return out


def surgery_heads(model: MiniModel, keep: Iterable) -> MiniModel:
    """Copy of ``model`` whose attention projections hold only the heads in ``keep``.

    Attention sub-layers with no head listed keep all their heads; a
    sub-layer can only be emptied through :func:`surgery_sublayers`.
    """
    keep_set = {h if isinstance(h, HeadId) else HeadId.parse(h) for h in keep}
    present = set(model.all_heads())
    unknown = keep_set - present
    if unknown:
        raise RecipeError(f"cannot keep absent heads {sorted(map(str, unknown))}")
    return _shrink(model, {s: [h.head for h in model.heads_of(s) if h in keep_set] for s in {h.sublayer for h in keep_set}})


def apply_masks(model: MiniModel, masks: MaskSet) -> MiniModel:
    """Surgery equivalent of running ``model`` under ``masks``."""
    subs = [s for s in model.present_sublayers() if masks.keeps_sublayer(s)]
    out = surgery_sublayers(model, subs)
    plan = {}
    for s in out.present_sublayers():
        if s.is_attention:
            heads = [h.head for h in out.heads_of(s) if masks.keeps_head(h)]
            if len(heads) != len(out.arch[s].heads):
                plan[s] = heads
    return _shrink(out, plan)


def _shrink(model: MiniModel, plan: dict[SublayerId, list[int]]) -> MiniModel:
    out = model.copy()
    dh = model.config.d_head
    for sid, heads in sorted(plan.items()):
        if not heads:
            raise RecipeError(f"{sid} would keep zero heads; drop the sub-layer instead")
        cur = list(out.arch[sid].heads)
        cols = np.concatenate([np.arange(cur.index(h) * dh, (cur.index(h) + 1) * dh) for h in heads])
        prefix = _sub_prefix(sid)
        p = out.params
        for n in ("q", "k", "v"):
            w, b = f"{prefix}.{n}_proj.weight", f"{prefix}.{n}_proj.bias"
            p[w] = Tensor(p[w].data[:, cols].copy(), requires_grad=True, name=w)
            p[b] = Tensor(p[b].data[cols].copy(), requires_grad=True, name=b)
        w = f"{prefix}.out_proj.weight"
        p[w] = Tensor(p[w].data[cols, :].copy(), requires_grad=True, name=w)
        out.arch[sid] = SublayerArch(True, tuple(heads))
    return out
