from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..model.ids import MaskSet, SublayerId, site
from ..model.network import MiniModel
from .patching import capture
from .perplexity import Data, as_batch

AGREEMENT_THRESHOLD = 0.95


def pathway_route(model: MiniModel) -> list[SublayerId]:
    """Self-attention and feed-forward sub-layers from layer 1 up to the last self-attention.

    On four layers this is ``S1 M1 S2 M2 S3``: the steps that can carry the
    keyword's information to the answer-start position ahead of the final
    cross-attention query.
    """
    n = model.config.n_layers
    route = []
    for layer in range(1, n):
        route.append(SublayerId.make("S", layer))
        if layer < n - 1:
            route.append(SublayerId.make("M", layer))
    return [s for s in route if model.arch[s].present]


@dataclass
class Pathway:
    transform: tuple[str, ...]  # route sub-layers that run; the rest pass the residual through
    agreement: float

    def to_dict(self) -> dict:
        return {"transform": list(self.transform), "agreement": self.agreement}


def _query_at_answer(model: MiniModel, batch, masks: MaskSet, target: SublayerId) -> np.ndarray:
    q = capture(model, batch, [site(target, "query")], masks)[site(target, "query")]
    pos = batch.prompt_lens - 1
    return q[np.arange(len(batch)), :, pos, :]  # (B, H, dh)


def cosine_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine between matching head vectors, averaged over heads and samples."""
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(cos.mean())


def pathway_search(model: MiniModel, data: Data, route: Optional[Sequence[SublayerId]] = None) -> list[Pathway]:
    """Score all ``2^L`` transform/residual choices along ``route`` by final-query agreement.

    Sub-layers off the route always run. Ranked by agreement (descending),
    then by fewer transforms, then lexicographically.
    """
    b = as_batch(data)
    route = list(route) if route is not None else pathway_route(model)
    target = SublayerId.make("C", model.config.n_layers - 1)
    ref = _query_at_answer(model, b, MaskSet.identity(), target)
    out = []
    for bits in itertools.product((False, True), repeat=len(route)):
        dropped = [s for s, keep in zip(route, bits) if not keep]
        q = _query_at_answer(model, b, MaskSet.drop(dropped), target)
        out.append(Pathway(tuple(str(s) for s, keep in zip(route, bits) if keep), cosine_agreement(q, ref)))
    return sorted(out, key=lambda p: (-p.agreement, len(p.transform), p.transform))


def minimal_effective(pathways: Sequence[Pathway], threshold: float = AGREEMENT_THRESHOLD) -> Optional[Pathway]:
    """Fewest transforms reaching ``threshold``; best agreement among equals."""
    ok = [p for p in pathways if p.agreement >= threshold]
    if not ok:
        return None
    return min(ok, key=lambda p: (len(p.transform), -p.agreement, p.transform))
