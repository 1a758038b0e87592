from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..compress.accounting import count_flops, count_params
from ..interp.perplexity import as_batch, token_nll
from ..model.ids import MaskSet
from ..model.network import MiniModel
from ..synthdocs.generate import Example, encode_prompt
from ..synthdocs.vocab import detokenize
from ..tensor.autograd import ContractError
from .. import tensor as T
from .similarity import ANLS_TAU, exact_match, sample_anls

MAX_NEW = 8
CONVENTION = "mac1/no-cache"


@dataclass
class EvalReport:
    model_id: str
    recipe_id: str
    split: str
    anls: float
    exact_match: float
    perplexity: float
    per_task_anls: dict[str, float]
    n_params: int
    flops: int
    n_samples: int
    seeds: list[int] = field(default_factory=list)
    per_task_exact: dict[str, float] = field(default_factory=dict)
    predictions: list[str] = field(default_factory=list)

    def to_dict(self, with_predictions: bool = False) -> dict:
        d = asdict(self)
        if not with_predictions:
            d.pop("predictions")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def flop_shape(examples: Sequence[Example]) -> tuple[int, int]:
    """Rounded mean prompt length and answer length (plus EOS) of a split."""
    n = [len(encode_prompt(ex.qa).prompt) for ex in examples]
    m = [len(ex.qa.answer_tokens) + 1 for ex in examples]
    return int(round(float(np.mean(n)))), int(round(float(np.mean(m))))


def evaluate(
    model: MiniModel,
    examples: Sequence[Example],
    masks: Optional[MaskSet] = None,
    split: str = "evaluation",
    model_id: str = "model",
    recipe_id: str = "teacher",
    seeds: Sequence[int] = (),
    n_params: Optional[int] = None,
    max_new: int = MAX_NEW,
    tau: float = ANLS_TAU,
) -> EvalReport:
    """Greedy generation per sample plus teacher-forced perplexity and decoder costs.

    ``n_params`` overrides the structural decoder count (used for
    unstructured masks, which keep dense FLOPs).
    """
    b = as_batch(list(examples))
    prompts = [list(b.inputs[i, : b.prompt_lens[i]]) for i in range(len(b))]
    with T.no_grad():
        enc = model.encode(b.grids).data
    preds = [detokenize(g) for g in model.generate(enc, prompts, max_new, masks)]
    refs = [ex.qa.answer for ex in examples]
    scores = np.array([sample_anls(p, r, tau) for p, r in zip(preds, refs)])
    exact = np.array([exact_match(p, r) for p, r in zip(preds, refs)], dtype=float)
    tasks = sorted(set(b.tasks))
    per_anls = {t: float(scores[[i for i, x in enumerate(b.tasks) if x == t]].mean()) for t in tasks}
    per_em = {t: float(exact[[i for i, x in enumerate(b.tasks) if x == t]].mean()) for t in tasks}
    masks = masks or MaskSet.identity()
    n, m = flop_shape(examples)
    params = count_params(model.config, masks, model.arch).decoder_params if n_params is None else int(n_params)
    flops = count_flops(model.config, masks, n=n, m=m, convention=CONVENTION, arch=model.arch).decoder_flops
    return EvalReport(
        model_id, recipe_id, split, float(scores.mean()), float(exact.mean()), token_nll(model, b, masks).perplexity,
        per_anls, int(params), int(flops), len(b), [int(s) for s in seeds], per_em, preds,
    )


@dataclass(frozen=True)
class ComparisonRow:
    model_id: str
    recipe_id: str
    anls: float
    exact_match: float
    n_params: int
    flops: int
    param_fraction: float
    flop_fraction: float
    anls_delta: float  # relative to the teacher row


def compare(reports: Sequence[EvalReport], teacher: Optional[str] = None) -> list[ComparisonRow]:
    """Rows sorted by ANLS (descending); fractions and deltas relative to the teacher.

    The teacher is the report whose ``recipe_id`` equals ``teacher`` (default
    ``"teacher"``), falling back to the report with the most parameters.
    """
    if len(reports) < 2:
        raise ContractError("compare needs at least two reports")
    splits = {r.split for r in reports}
    if len(splits) > 1:
        raise ContractError(f"reports come from different splits: {sorted(splits)}")
    name = teacher or "teacher"
    ref = next((r for r in reports if r.recipe_id == name), None) or max(reports, key=lambda r: r.n_params)
    rows = [
        ComparisonRow(
            r.model_id, r.recipe_id, r.anls, r.exact_match, r.n_params, r.flops,
            r.n_params / ref.n_params, r.flops / ref.flops if ref.flops else 1.0, r.anls - ref.anls,
        )
        for r in reports
    ]
    return sorted(rows, key=lambda r: (-r.anls, r.recipe_id, r.model_id))


CSV_COLUMNS = (
    "model_id", "recipe_id", "split", "anls", "exact_match", "perplexity", "n_params", "flops", "n_samples", "seeds",
    "anls_transcription", "anls_keyword", "anls_keyvalue", "anls_casing",
)


def to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([
            r.model_id, r.recipe_id, r.split, f"{r.anls:.6f}", f"{r.exact_match:.6f}", f"{r.perplexity:.6f}",
            r.n_params, r.flops, r.n_samples, " ".join(map(str, r.seeds)),
            *(f"{r.per_task_anls[t]:.6f}" if t in r.per_task_anls else "" for t in ("transcription", "keyword", "keyvalue", "casing")),
        ])
    return buf.getvalue()


def render_table(rows: Sequence[ComparisonRow]) -> str:
    """Plain-text table: model, parameters, FLOPs (with fractions of the teacher) and ANLS."""
    head = f"{'model':<24} {'params':>10} {'(%)':>6} {'FLOPs':>12} {'(%)':>6} {'ANLS':>7} {'EM':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.recipe_id:<24} {r.n_params:>10d} {100 * r.param_fraction:>6.1f} {r.flops:>12d} "
            f"{100 * r.flop_fraction:>6.1f} {100 * r.anls:>7.2f} {100 * r.exact_match:>7.2f}"
        )
    return "\n".join(lines) + "\n"
