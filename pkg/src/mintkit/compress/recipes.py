"""Pruning recipes: the interpretability-guided pair, enumeration, and baselines."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..interp.heads import HeadStats, importance_order
from ..interp.sweeps import ReprojectionResult, SweepResult
from ..model.config import MiniModelConfig
from ..model.ids import HeadId, MaskSet, SublayerId, sublayers
from .accounting import count_flops, count_params, sublayer_params
from .surgery import RecipeError

BUDGET_SLACK = 0.005
REINTRODUCE_THRESHOLD = 0.02  # exact-match drop (fraction) that marks a head as task-critical


@dataclass
class PruneRecipe:
    name: str
    keep_sublayers: list[str]
    keep_heads: Optional[list[str]] = None  # None: every head of every kept attention sub-layer
    reintroduced: list[str] = field(default_factory=list)
    target_fraction: float = 1.0
    param_fraction: float = 1.0
    notes: list[str] = field(default_factory=list)

    def masks(self, config: MiniModelConfig) -> MaskSet:
        keep = set(self.keep_sublayers)
        dropped = [s for s in sublayers(config.n_layers) if str(s) not in keep]
        heads: list[HeadId] = []
        if self.keep_heads is not None:
            kh = set(self.keep_heads)
            for s in sublayers(config.n_layers):
                if s.is_attention and str(s) in keep:
                    heads += [HeadId(s, h) for h in range(config.n_heads) if str(HeadId(s, h)) not in kh]
        return MaskSet.drop(dropped, heads)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "keep_sublayers": list(self.keep_sublayers),
            "keep_heads": None if self.keep_heads is None else list(self.keep_heads),
            "reintroduced": list(self.reintroduced),
            "target_fraction": self.target_fraction,
            "param_fraction": self.param_fraction,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneRecipe":
        return cls(
            d["name"], list(d["keep_sublayers"]), d.get("keep_heads"), list(d.get("reintroduced", [])),
            d.get("target_fraction", 1.0), d.get("param_fraction", 1.0), list(d.get("notes", [])),
        )


def decoder_fraction(config: MiniModelConfig, masks: MaskSet) -> float:
    return count_params(config, masks).decoder_params / count_params(config).decoder_params


def flop_fraction(config: MiniModelConfig, masks: MaskSet, n: int, m: int, convention: str = "mac1/no-cache") -> float:
    full = count_flops(config, n=n, m=m, convention=convention).decoder_flops
    return count_flops(config, masks, n=n, m=m, convention=convention).decoder_flops / full


def recipe_from_masks(name: str, config: MiniModelConfig, masks: MaskSet, target: float, **kw) -> PruneRecipe:
    keep = [str(s) for s in sublayers(config.n_layers) if masks.keeps_sublayer(s)]
    heads = None
    if masks.dropped_heads:
        heads = [
            str(HeadId(s, h))
            for s in sublayers(config.n_layers)
            if s.is_attention and masks.keeps_sublayer(s)
            for h in range(config.n_heads)
            if masks.keeps_head(HeadId(s, h))
        ]
    return PruneRecipe(name, keep, heads, target_fraction=target, param_fraction=decoder_fraction(config, masks), **kw)


# ---------------------------------------------------------------- interpretability-guided pair


@dataclass(frozen=True)
class MintBudgets:
    coarse: float = 0.31
    fine: float = 0.07
    slack: float = BUDGET_SLACK
    reintroduce_threshold: float = REINTRODUCE_THRESHOLD


def coarse_keep_set(config: MiniModelConfig, sweep: SweepResult, budget: float, slack: float = BUDGET_SLACK) -> list[SublayerId]:
    """Largest skip-deltas first while the decoder fraction stays within ``budget + slack``."""
    total = count_params(config).decoder_params
    limit = (budget + slack) * total
    ranked = [SublayerId.parse(k) for k, _ in sweep.ranked()]
    keep: list[SublayerId] = []
    used = 0
    best_c = next((s for s in ranked if s.kind == "C"), None)
    if best_c is None:
        raise RecipeError("sweep contains no cross-attention sub-layer")
    if sublayer_params(config, best_c) > limit:
        raise RecipeError(f"budget {budget:.3f} cannot hold a single cross-attention sub-layer")
    keep.append(best_c)
    used += sublayer_params(config, best_c)
    for s in ranked:
        if s in keep:
            continue
        p = sublayer_params(config, s)
        if used + p <= limit:
            keep.append(s)
            used += p
    return sorted(keep)


def mint_recipe(
    config: MiniModelConfig,
    stats: HeadStats,
    sweep: SweepResult,
    budgets: MintBudgets = MintBudgets(),
    reprojection: Optional[ReprojectionResult] = None,
    task_exact: Optional[Callable[[MaskSet], dict[str, float]]] = None,
) -> tuple[PruneRecipe, PruneRecipe]:
    """Coarse (sub-layer) and fine (head) recipes.

    Fine stage, starting from the coarse keep set:

    1. if over budget and the first feed-forward is absorbable per the
       reprojection sweep, drop it;
    2. if one head per attention sub-layer plus the remaining feed-forwards
       still exceeds the budget, drop feed-forwards by ascending skip-delta;
    3. drop heads least-important first (never a sub-layer's last head);
    4. with ``task_exact``, restore each dropped head whose return raises any
       task's exact-match by more than the threshold, then trim again among
       the heads that were not restored.
    """
    total = count_params(config).decoder_params
    coarse_keep = coarse_keep_set(config, sweep, budgets.coarse, budgets.slack)
    coarse_masks = MaskSet.drop([s for s in sublayers(config.n_layers) if s not in coarse_keep])
    coarse = recipe_from_masks("mint_coarse", config, coarse_masks, budgets.coarse)

    limit = (budgets.fine + budgets.slack) * total
    keep = list(coarse_keep)
    notes: list[str] = []
    m0 = SublayerId.make("M", 0)

    def params(ks, dropped_heads=()):
        m = MaskSet.drop([s for s in sublayers(config.n_layers) if s not in ks], dropped_heads)
        return count_params(config, m).decoder_params

    if params(keep) > limit and m0 in keep and reprojection is not None and reprojection.absorbable("S1.input"):
        keep.remove(m0)
        notes.append("M0 dropped: token reprojection through S1.input stays within tolerance")

    def floor_params(ks):
        dropped = [HeadId(s, h) for s in ks if s.is_attention for h in range(1, config.n_heads)]
        return params(ks, dropped)

    ff_by_delta = sorted([s for s in keep if s.kind == "M"], key=lambda s: (sweep.deltas.get(str(s), 0.0), s))
    while floor_params(keep) > limit and ff_by_delta:
        s = ff_by_delta.pop(0)
        keep.remove(s)
        notes.append(f"{s} dropped to make the head budget feasible")
    if floor_params(keep) > limit:
        raise RecipeError(f"fine budget {budgets.fine:.3f} is infeasible even with one head per sub-layer")

    order = [h for h in importance_order(stats) if h.sublayer in keep]
    dropped = _trim(config, keep, order, set(), limit, params)
    reintroduced: list[HeadId] = []
    if task_exact is not None and dropped:
        def mask_for(dh):
            return MaskSet.drop([s for s in sublayers(config.n_layers) if s not in keep], dh)

        base = task_exact(mask_for(dropped))
        for h in sorted(dropped, key=lambda h: order.index(h), reverse=True):
            trial = task_exact(mask_for([x for x in dropped if x != h]))
            if any(trial[t] - base.get(t, 0.0) > budgets.reintroduce_threshold for t in trial):
                reintroduced.append(h)
        if reintroduced:
            dropped = _trim(config, keep, order, set(reintroduced), limit, params)
            notes.append(f"reintroduced {len(reintroduced)} task-critical heads, re-trimmed to budget")
    fine_masks = MaskSet.drop([s for s in sublayers(config.n_layers) if s not in keep], dropped)
    fine = recipe_from_masks("mint_fine", config, fine_masks, budgets.fine, reintroduced=[str(h) for h in reintroduced], notes=notes)
    if fine.keep_heads is None:
        fine.keep_heads = [str(h) for s in keep if s.is_attention for h in (HeadId(s, i) for i in range(config.n_heads))]
    return coarse, fine


def _trim(config, keep, order: Sequence[HeadId], protected: set, limit: float, params) -> list[HeadId]:
    """Drop heads along ``order`` (least important first) until within ``limit``."""
    dropped: list[HeadId] = []
    left = {s: config.n_heads for s in keep if s.is_attention}
    for h in order:
        if params(keep, dropped) <= limit:
            break
        if h in protected or left[h.sublayer] <= 1:
            continue
        dropped.append(h)
        left[h.sublayer] -= 1
    if params(keep, dropped) > limit:
        raise RecipeError("head budget cannot be met without removing protected heads")
    return dropped


# ---------------------------------------------------------------- random baselines


def random_sublayer_masks(config: MiniModelConfig, like: PruneRecipe, k: int, seed: int) -> list[MaskSet]:
    """``k`` distinct random keep sets with the same number of S, C and M sub-layers as ``like``.

    Each keeps at least one cross-attention (guaranteed because the count of
    C sub-layers is copied) and none equals ``like`` itself when avoidable.
    """
    rng = np.random.default_rng(seed)
    kept = [SublayerId.parse(s) for s in like.keep_sublayers]
    counts = {kind: sum(1 for s in kept if s.kind == kind) for kind in "SCM"}
    pools = {kind: [s for s in sublayers(config.n_layers) if s.kind == kind] for kind in "SCM"}
    seen = {frozenset(kept)}
    out = []
    for _ in range(200 * k):
        if len(out) == k:
            break
        pick = frozenset(
            s for kind in "SCM" for s in (pools[kind][int(i)] for i in rng.choice(len(pools[kind]), counts[kind], replace=False))
        )
        if pick in seen:
            continue
        seen.add(pick)
        out.append(MaskSet.drop([s for s in sublayers(config.n_layers) if s not in pick]))
    return out


def random_head_masks(config: MiniModelConfig, like: PruneRecipe, k: int, seed: int) -> list[MaskSet]:
    """Same sub-layers and head count as ``like``; heads drawn at random (at least one per sub-layer)."""
    rng = np.random.default_rng(seed)
    keep = [SublayerId.parse(s) for s in like.keep_sublayers]
    attn = [s for s in keep if s.is_attention]
    n_keep = len(like.keep_heads) if like.keep_heads is not None else len(attn) * config.n_heads
    out = []
    seen = {frozenset(like.keep_heads or [])}
    for _ in range(200 * k):
        if len(out) == k:
            break
        chosen = {HeadId(s, int(rng.integers(config.n_heads))) for s in attn}
        rest = [HeadId(s, h) for s in attn for h in range(config.n_heads) if HeadId(s, h) not in chosen]
        extra = rng.choice(len(rest), n_keep - len(chosen), replace=False) if n_keep > len(chosen) else []
        chosen |= {rest[int(i)] for i in extra}
        key = frozenset(str(h) for h in chosen)
        if key in seen:
            continue
        seen.add(key)
        dropped = [HeadId(s, h) for s in attn for h in range(config.n_heads) if HeadId(s, h) not in chosen]
        out.append(MaskSet.drop([s for s in sublayers(config.n_layers) if s not in keep], dropped))
    return out


# ---------------------------------------------------------------- enumeration


@dataclass(frozen=True)
class StudentBudget:
    max_param_fraction: float = 1.0
    max_flop_fraction: float = 1.0
    n: int = 12
    m: int = 4
    convention: str = "mac1/no-cache"


def enumerate_students(
    config: MiniModelConfig,
    budget: StudentBudget = StudentBudget(),
    limit: Optional[int] = None,
    score: Optional[Callable[[MaskSet], float]] = None,
) -> list[tuple[MaskSet, float]]:
    """Every keep set with a cross-attention that satisfies the budget, best proxy score first.

    ``score`` is lower-is-better (teacher-forced perplexity); without it the
    candidates stay in enumeration order with score 0.
    """
    subs = sublayers(config.n_layers)
    if len(subs) > 16:
        raise RecipeError(f"{len(subs)} sub-layers exceed the 2^16 enumeration cap")
    full_p = count_params(config).decoder_params
    full_f = count_flops(config, n=budget.n, m=budget.m, convention=budget.convention).decoder_flops
    out = []
    for bits in itertools.product((True, False), repeat=len(subs)):
        keep = [s for s, b in zip(subs, bits) if b]
        if not any(s.kind == "C" for s in keep):
            continue
        masks = MaskSet.drop([s for s, b in zip(subs, bits) if not b])
        p = count_params(config, masks).decoder_params
        f = count_flops(config, masks, n=budget.n, m=budget.m, convention=budget.convention).decoder_flops
        if p <= budget.max_param_fraction * full_p + 1e-9 and f <= budget.max_flop_fraction * full_f + 1e-9:
            out.append(masks)
    scored = [(m, float(score(m)) if score is not None else 0.0) for m in out]
    scored.sort(key=lambda t: (t[1], sorted(str(s) for s in t[0].dropped_sublayers)))
    return scored[:limit] if limit is not None else scored


# ---------------------------------------------------------------- structured baseline


def structured_baseline(
    config: MiniModelConfig,
    budget: float,
    score: Callable[[MaskSet], float],
    head_order: Optional[Sequence[HeadId]] = None,
    slack: float = BUDGET_SLACK,
) -> PruneRecipe:
    """Greedy layer-wise removal: repeatedly drop the sub-layer whose removal hurts ``score`` least.

    Stops once within budget. If one cross-attention alone is still over
    budget, heads are removed along ``head_order`` (a saliency order,
    least salient first).
    """
    total = count_params(config).decoder_params
    limit = (budget + slack) * total
    masks = MaskSet.identity()
    while count_params(config, masks).decoder_params > limit:
        cands = [
            s for s in sublayers(config.n_layers)
            if masks.keeps_sublayer(s)
            and any(c.kind == "C" and masks.keeps_sublayer(c) and c != s for c in sublayers(config.n_layers))
        ]
        if not cands:
            break
        best = min(cands, key=lambda s: (score(masks.with_dropped(sublayers=[s])), s))
        masks = masks.with_dropped(sublayers=[best])
    if count_params(config, masks).decoder_params > limit:
        if head_order is None:
            raise RecipeError("structured baseline needs a head order to reach the budget")
        left = {s: config.n_heads for s in sublayers(config.n_layers) if s.is_attention and masks.keeps_sublayer(s)}
        for h in head_order:
            if count_params(config, masks).decoder_params <= limit:
                break
            if h.sublayer in left and left[h.sublayer] > 1:
                masks = masks.with_dropped(heads=[h])
                left[h.sublayer] -= 1
    return recipe_from_masks("structured", config, masks, budget)
