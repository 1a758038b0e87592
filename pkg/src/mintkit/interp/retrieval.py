"""Key-value retrieval hypotheses under a patched final cross-attention query.

The query computed on the clean document is written into a run on the
corrupted document, and the generated value is labelled:

* ``positional``  - the value that now sits on the line where the key used to be
* ``semantic``    - the value the corrupted document assigns to the key
* ``memorized``   - the clean document's value for the key
* ``failure``     - anything else

Cases where two of the first three candidates coincide cannot be told apart
and are rejected (counted separately).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..model.ids import SublayerId, site
from ..model.network import MiniModel
from ..synthdocs.batching import collate
from ..synthdocs.generate import CorruptionError, Example, QAPair, SynthDoc, corrupt_keyvalue
from ..synthdocs.vocab import detokenize
from .. import tensor as T
from .patching import overwrite

LABELS = ("positional", "semantic", "memorized", "failure")
REJECTED = "rejected"

# Reference values for the full-size model on real-word key/value classes; not expected at toy scale.
REFERENCE_PERCENTAGES = {
    "colors": {"positional": 53.0, "semantic": 31.0, "memorized": 8.0, "failure": 8.0},
    "nouns": {"positional": 40.4, "semantic": 26.2, "memorized": 3.7, "failure": 29.7},
    "numbers": {"positional": 37.2, "semantic": 44.6, "memorized": 9.1, "failure": 9.1},
}


def candidates(clean: SynthDoc, corrupt: SynthDoc, key: str) -> dict[str, Optional[str]]:
    row = next(f.row for f in clean.fields if f.key == key)
    at_row = next((f.value for f in corrupt.fields if f.row == row), None)
    return {"positional": at_row, "semantic": corrupt.value_of(key), "memorized": clean.value_of(key)}


def label_output(output: str, cands: dict[str, Optional[str]]) -> str:
    vals = [cands[k] for k in ("positional", "semantic", "memorized")]
    if any(v is None for v in vals) or len(set(vals)) < 3:
        return REJECTED
    for k in ("positional", "semantic", "memorized"):
        if output == cands[k]:
            return k
    return "failure"


@dataclass
class HypothesisTally:
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in LABELS})
    rejected: int = 0
    cases: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, label: str, record: Optional[dict] = None) -> None:
        if label == REJECTED:
            self.rejected += 1
        else:
            self.counts[label] += 1
        if record is not None:
            self.cases.append(record)

    def percentages(self) -> dict[str, float]:
        t = self.total
        return {k: (100.0 * v / t if t else 0.0) for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "total": self.total,
            "rejected": self.rejected,
            "percentages": self.percentages(),
            "reference_percentages": REFERENCE_PERCENTAGES,
        }


def _patched_outputs(model: MiniModel, clean: Sequence[Example], corrupt: Sequence[Example], target: str, max_new: int) -> list[str]:
    """Greedy outputs on the corrupted docs with ``target`` overwritten by the clean run's values.

    The clean run is teacher-forced on the model's own clean answer, so a
    patched step at any answer position receives the query the clean run
    produced there.
    """
    cb = collate(list(clean))
    prompts = [list(cb.inputs[i, : cb.prompt_lens[i]]) for i in range(len(cb))]
    with T.no_grad():
        enc_clean = model.encode(cb.grids).data
        enc_corrupt = model.encode(np.stack([ex.doc.grid for ex in corrupt])).data
    own = model.generate(enc_clean, prompts, max_new)
    width = max(len(p) + len(o) for p, o in zip(prompts, own))
    toks = np.zeros((len(prompts), width), dtype=np.int64)
    for i, (p, o) in enumerate(zip(prompts, own)):
        seq = p + o
        toks[i, : len(seq)] = seq
    with T.no_grad():
        _, trace = model.decode(enc_clean, toks, capture=[target])
    fn = overwrite(target, trace[target])
    gen = model.generate(enc_corrupt, prompts, max_new, patches={target: fn})
    return [detokenize(g) for g in gen]


def classify_retrieval(
    model: MiniModel,
    clean: SynthDoc,
    corrupt: SynthDoc,
    qa: QAPair,
    key: str,
    site_name: Optional[str] = None,
    max_new: int = 4,
) -> str:
    """Label one case (or ``rejected``)."""
    cands = candidates(clean, corrupt, key)
    if label_output("", cands) == REJECTED:
        return REJECTED
    target = site_name or site(SublayerId.make("C", model.config.n_layers - 1), "query")
    out = _patched_outputs(model, [Example(clean, qa)], [Example(corrupt, qa)], target, max_new)[0]
    return label_output(out, cands)


def retrieval_tally(
    model: MiniModel,
    pool: Sequence[Example],
    n_cases: int = 500,
    seed: int = 0,
    max_new: int = 4,
    batch: int = 250,
    max_attempts: Optional[int] = None,
) -> HypothesisTally:
    """Classify corruption cases drawn from the key-value examples of ``pool`` until ``n_cases`` are accepted.

    Corruptions move keys as well as values across the document's lines
    (``corrupt_keyvalue(..., move_keys=True)``); with keys fixed, the
    positional and semantic candidates would always coincide.
    """
    kv = [ex for ex in pool if ex.task in ("keyvalue", "casing") and len([f for f in ex.doc.fields if f.kind == "pair"]) >= 2]
    tally = HypothesisTally()
    if not kv:
        return tally
    max_attempts = max_attempts if max_attempts is not None else 20 * n_cases
    target = site(SublayerId.make("C", model.config.n_layers - 1), "query")
    rng = np.random.default_rng(seed)
    attempts = 0
    while tally.total < n_cases and attempts < max_attempts:
        todo = []
        while len(todo) < batch and attempts < max_attempts:
            ex = kv[attempts % len(kv)]
            attempts += 1
            key = next(f.key for f in ex.doc.fields if f.value == ex.qa.answer)
            try:
                bad = corrupt_keyvalue(ex.doc, int(rng.integers(0, 2**31)), move_keys=True)
            except CorruptionError:
                tally.add(REJECTED)
                continue
            cands = candidates(ex.doc, bad, key)
            if label_output("", cands) == REJECTED:
                tally.add(REJECTED, {"doc": ex.doc.doc_id, "label": REJECTED})
                continue
            todo.append((ex, bad, key, cands))
        if not todo:
            break
        outs = _patched_outputs(model, [t[0] for t in todo], [Example(t[1], t[0].qa) for t in todo], target, max_new)
        for (ex, bad, key, cands), out in zip(todo, outs):
            if tally.total >= n_cases:
                break
            lab = label_output(out, cands)
            tally.add(lab, {"doc": ex.doc.doc_id, "key": key, "output": out, "label": lab, **{f"cand_{k}": v for k, v in cands.items()}})
    return tally
