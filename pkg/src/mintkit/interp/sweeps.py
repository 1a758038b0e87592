"""Skipping and token-reprojection sweeps, and the final feed-forward (M3-style) experiment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..model.ids import MaskSet, SublayerId, site
from ..model.network import MiniModel
from ..tensor.autograd import ContractError
from .patching import capture
from .perplexity import Data, as_batch, token_nll

REPROJECTION_TOL = 0.05


@dataclass
class SweepResult:
    """Perplexity delta per unit (sub-layer, head or boundary site) against one shared baseline."""

    kind: str
    deltas: dict[str, float]
    baseline: float
    split: str
    n_samples: int
    masks: dict[str, dict] = field(default_factory=dict)

    def ranked(self) -> list[tuple[str, float]]:
        """Largest delta first; ties by unit order of insertion."""
        order = {k: i for i, k in enumerate(self.deltas)}
        return sorted(self.deltas.items(), key=lambda kv: (-kv[1], order[kv[0]]))

    def most_critical(self) -> str:
        return self.ranked()[0][0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "split": self.split,
            "n_samples": self.n_samples,
            "baseline": self.baseline,
            "deltas": dict(self.deltas),
            "masks": self.masks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(d["kind"], dict(d["deltas"]), d["baseline"], d["split"], d["n_samples"], dict(d.get("masks", {})))


def skip_sweep(
    model: MiniModel,
    data: Data,
    split: str = "interp",
    heads: bool = False,
    base: Optional[MaskSet] = None,
) -> SweepResult:
    """Drop each present sub-layer (or head) alone and record ``ppl(drop) - ppl(base)``."""
    b = as_batch(data)
    base = base or MaskSet.identity()
    baseline = token_nll(model, b, base).perplexity
    deltas: dict[str, float] = {}
    masks: dict[str, dict] = {}
    units: Sequence = model.all_heads() if heads else model.present_sublayers()
    for u in units:
        if heads:
            m = base.with_dropped(heads=[u])
            if not base.keeps_head(u):
                continue
        else:
            m = base.with_dropped(sublayers=[u])
            if not base.keeps_sublayer(u):
                continue
        deltas[str(u)] = token_nll(model, b, m).perplexity - baseline
        masks[str(u)] = m.to_dict()
    return SweepResult("head_skip" if heads else "skip", deltas, baseline, split, len(b), masks)


# ---------------------------------------------------------------- token reprojection


def reproject(model: MiniModel, x: np.ndarray) -> np.ndarray:
    """``E[argmax(x U)] + P[pos]`` for a ``(B, T, d)`` residual activation."""
    if not model.config.tie_unembedding:
        raise ContractError("token reprojection needs tied embedding and unembedding")
    tok = (x @ model.unembedding_matrix()).argmax(axis=-1)
    pos = model.params["embed.positions.weight"].data[: x.shape[1]]
    return model.embedding.data[tok] + pos[None]


def reprojection_boundaries(model: MiniModel) -> list[str]:
    return [site(s, "input") for s in model.all_sublayers()] + ["final"]


@dataclass
class ReprojectionResult:
    sweep: SweepResult
    tol: float
    earliest_below: Optional[str]
    prune_through: Optional[str]  # deepest boundary such that it and every earlier one stay within tol

    def absorbable(self, boundary: str) -> bool:
        """True when every boundary up to and including ``boundary`` stays within tolerance."""
        names = list(self.sweep.deltas)
        if self.prune_through is None or boundary not in names:
            return False
        return names.index(boundary) <= names.index(self.prune_through)

    def to_dict(self) -> dict:
        d = self.sweep.to_dict()
        d.update({"tol": self.tol, "earliest_below": self.earliest_below, "prune_through": self.prune_through})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReprojectionResult":
        return cls(SweepResult.from_dict(d), d["tol"], d["earliest_below"], d["prune_through"])


def token_reprojection_sweep(
    model: MiniModel,
    data: Data,
    split: str = "interp",
    tol: float = REPROJECTION_TOL,
    masks: Optional[MaskSet] = None,
) -> ReprojectionResult:
    """Reproject the residual stream at one boundary at a time; deltas relative to the clean run.

    ``tol`` is relative: a boundary counts as "within tolerance" when its
    perplexity rises by at most ``tol`` times the baseline.
    """
    if not model.config.tie_unembedding:
        raise ContractError("token reprojection needs tied embedding and unembedding")
    b = as_batch(data)
    baseline = token_nll(model, b, masks).perplexity
    deltas: dict[str, float] = {}
    for name in reprojection_boundaries(model):
        deltas[name] = token_nll(model, b, masks, {name: lambda x: reproject(model, x)}).perplexity - baseline
    sweep = SweepResult("reprojection", deltas, baseline, split, len(b))
    limit = tol * baseline
    below = [k for k, v in deltas.items() if v <= limit]
    through = None
    for k, v in deltas.items():
        if v > limit:
            break
        through = k
    return ReprojectionResult(sweep, tol, below[0] if below else None, through)


# ---------------------------------------------------------------- M3 experiment

DEFAULT_THRESHOLDS = (1.0, 1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0, 20.0)


@dataclass
class CurveTable:
    """Fraction of samples whose perplexity is at most each threshold, per condition."""

    thresholds: tuple[float, ...]
    curves: dict[str, list[float]]
    per_sample: dict[str, list[float]]
    target: str

    def to_dict(self) -> dict:
        return {"target": self.target, "thresholds": list(self.thresholds), "curves": self.curves}

    def distance_to_clean(self, condition: str) -> float:
        """Mean absolute gap between a condition's curve and the clean curve."""
        return float(np.mean(np.abs(np.array(self.curves[condition]) - np.array(self.curves["clean"]))))


def final_ff_experiment(
    model: MiniModel,
    data: Data,
    layer: Optional[int] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> CurveTable:
    """Clean run vs skipping the last feed-forward vs replacing its output.

    In the replacement condition the feed-forward output is set to
    ``C.output - M.input`` of the same layer, so the residual stream leaving
    the layer carries only the cross-attention's read-out (its value-times-
    attention product through the output projection).
    """
    layer = model.config.n_layers - 1 if layer is None else layer
    m_sid, c_sid = SublayerId.make("M", layer), SublayerId.make("C", layer)
    b = as_batch(data)
    clean = token_nll(model, b)
    skipped = token_nll(model, b, MaskSet.drop([m_sid]))
    acts = capture(model, b, [site(c_sid, "output"), site(m_sid, "input")])
    replacement = acts[site(c_sid, "output")] - acts[site(m_sid, "input")]
    patched = token_nll(model, b, patches={site(m_sid, "output"): replacement})
    per = {
        "clean": clean.per_example_perplexity(),
        f"skip {m_sid}": skipped.per_example_perplexity(),
        f"patch {m_sid} with {c_sid}.av": patched.per_example_perplexity(),
    }
    th = tuple(float(t) for t in thresholds)
    curves = {k: [float(np.mean(v <= t)) for t in th] for k, v in per.items()}
    return CurveTable(th, curves, {k: [float(x) for x in v] for k, v in per.items()}, str(m_sid))


