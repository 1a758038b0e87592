"""Attention-head statistics, rankings and the patch-wise transcription probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import tensor as T
from ..model.ids import HeadId, MaskSet, SublayerId, site
from ..model.lens import entropy_rows, head_lens
from ..model.network import MiniModel
from ..synthdocs.vocab import BLANK
from .perplexity import Data, as_batch

CHUNK = 128


@dataclass
class HeadStats:
    """Mean attention entropy (nats) and variance per head.

    ``variance`` is the population variance of each attention row, averaged
    over rows; ``map_variance`` is the variance of the row-averaged map. Both
    are kept for every head; rankings use entropy for self-attention and
    ``variance`` for cross-attention.
    """

    entropy: dict[HeadId, float]
    variance: dict[HeadId, float]
    map_variance: dict[HeadId, float]
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "heads": {
                str(h): {
                    "entropy": self.entropy[h],
                    "variance": self.variance[h],
                    "map_variance": self.map_variance[h],
                }
                for h in sorted(self.entropy)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadStats":
        heads = {HeadId.parse(k): v for k, v in d["heads"].items()}
        return cls(
            {h: v["entropy"] for h, v in heads.items()},
            {h: v["variance"] for h, v in heads.items()},
            {h: v["map_variance"] for h, v in heads.items()},
            n_samples=d.get("n_samples", 0),
        )


def row_statistics(attn: np.ndarray, valid: np.ndarray, causal: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per head: summed row entropy, summed row variance over valid rows, and the summed map.

    ``attn`` is ``(B, H, T, K)``; ``valid`` marks real query rows ``(B, T)``.
    With ``causal`` the variance uses the row's own support: a self-attention
    row at position ``t`` only spans ``t + 1`` keys.
    """
    k = attn.shape[-1]
    w = valid[:, None, :].astype(np.float64)
    ent = (entropy_rows(attn) * w).sum(axis=(0, 2))
    if causal:
        support = np.arange(1, k + 1, dtype=np.float64)[None, None, :]
    else:
        support = np.full((1, 1, attn.shape[-2]), float(k))
    mean = 1.0 / support
    var = ((attn**2).sum(axis=-1) - 2 * mean * attn.sum(axis=-1)) / support + mean**2
    # the terms above count only in-support keys; masked keys hold exact zeros
    var = (var * w).sum(axis=(0, 2))
    amap = (attn * w[..., None]).sum(axis=(0, 2))
    return ent, var, amap


def head_statistics(model: MiniModel, data: Data, masks: Optional[MaskSet] = None) -> HeadStats:
    """Average entropy and variance of every present head's attention rows over ``data``."""
    b = as_batch(data)
    sids = [s for s in model.present_sublayers() if s.is_attention]
    sites_ = [site(s, "attn") for s in sids if masks is None or masks.keeps_sublayer(s)]
    ent: dict[HeadId, float] = {}
    var: dict[HeadId, float] = {}
    maps: dict[HeadId, np.ndarray] = {}
    rows = 0.0
    with T.no_grad():
        for lo in range(0, len(b), CHUNK):
            sub = b.subset(np.arange(lo, min(len(b), lo + CHUNK)))
            _, trace = model.decode(model.encode(sub.grids), sub.inputs, masks, capture=sites_)
            valid = np.arange(sub.inputs.shape[1])[None, :] < (sub.inputs != 0).sum(axis=1)[:, None]
            rows += float(valid.sum())
            for s in sids:
                name = site(s, "attn")
                if name not in trace:
                    continue
                e, v, m = row_statistics(trace[name], valid, causal=s.kind == "S")
                for j, hid in enumerate(model.arch[s].heads):
                    h = HeadId(s, hid)
                    ent[h] = ent.get(h, 0.0) + float(e[j])
                    var[h] = var.get(h, 0.0) + float(v[j])
                    if s.kind == "C":
                        maps[h] = maps.get(h, 0.0) + m[j]
    ent = {h: v / rows for h, v in ent.items()}
    var = {h: v / rows for h, v in var.items()}
    map_var = {h: float(np.var(maps[h] / rows)) if h in maps else float("nan") for h in ent}
    return HeadStats(ent, var, map_var, n_samples=len(b))


def rank_heads(stats: HeadStats) -> dict[str, list[HeadId]]:
    """Most important first: self-attention by ascending entropy, cross-attention by descending variance."""
    sa = [h for h in stats.entropy if h.sublayer.kind == "S"]
    ca = [h for h in stats.entropy if h.sublayer.kind == "C"]
    return {
        "S": sorted(sa, key=lambda h: (stats.entropy[h], h.sublayer.layer, h.head)),
        "C": sorted(ca, key=lambda h: (-stats.variance[h], h.sublayer.layer, h.head)),
    }


def importance_order(stats: HeadStats) -> list[HeadId]:
    """All heads, least important first, merged by normalised rank within each kind.

    Normalised rank is ``position / count`` from the unimportant end; ties go
    to self-attention first, then ``(layer, head)``.
    """
    ranked = rank_heads(stats)
    keyed = []
    for kind, order in ranked.items():
        n = len(order)
        for pos, h in enumerate(reversed(order)):
            keyed.append(((pos + 1) / n, 0 if kind == "S" else 1, h.sublayer.layer, h.head, h))
    return [k[-1] for k in sorted(keyed, key=lambda k: k[:4])]


# ---------------------------------------------------------------- transcription probe


@dataclass
class ProbeResult:
    layer: int
    heads_full: list[str]
    heads_subset: list[str]
    agreement_full: float
    agreement_subset: float
    agreement_random: float
    entropy_glyph_median: float
    entropy_blank_median: float
    n_glyph_patches: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def glyph_agreement(model: MiniModel, heads: Sequence[HeadId], grids: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Fraction of glyph-bearing patches whose head-lens argmax is the patch's own glyph."""
    with T.no_grad():
        enc = model.encode(grids).data
    probs = head_lens(model, list(heads), enc)
    flat = grids.reshape(grids.shape[0], -1)
    glyph = flat != BLANK
    hit = probs.argmax(axis=-1) == flat
    return float(hit[glyph].mean()), probs, glyph


def transcription_probe(
    model: MiniModel,
    stats: HeadStats,
    data: Data,
    remove: Optional[int] = None,
    seed: int = 0,
    random_draws: int = 8,
) -> ProbeResult:
    """Read every patch through the last cross-attention's heads.

    Compares the full head set with the set minus its ``remove`` lowest-variance
    heads and with ``random_draws`` random removals of the same size.
    """
    b = as_batch(data)
    layer = max(s.layer for s in model.present_sublayers() if s.kind == "C")
    sid = SublayerId.make("C", layer)
    full = [HeadId(sid, h) for h in model.arch[sid].heads]
    remove = len(full) // 2 if remove is None else remove
    remove = min(remove, len(full) - 1)
    by_var = sorted(full, key=lambda h: (stats.variance[h], h.head))
    subset = [h for h in full if h not in set(by_var[:remove])]
    a_full, probs, glyph = glyph_agreement(model, full, b.grids)
    a_sub, _, _ = glyph_agreement(model, subset, b.grids)
    rng = np.random.default_rng(seed)
    rand = []
    for _ in range(random_draws):
        drop = set(rng.choice(len(full), size=remove, replace=False).tolist())
        rand.append(glyph_agreement(model, [h for i, h in enumerate(full) if i not in drop], b.grids)[0])
    ent = entropy_rows(probs)
    return ProbeResult(
        layer,
        [str(h) for h in full],
        [str(h) for h in subset],
        a_full,
        a_sub,
        float(np.mean(rand)) if rand else a_full,
        float(np.median(ent[glyph])),
        float(np.median(ent[~glyph])),
        int(glyph.sum()),
    )
