"""Normalized edit similarity and its thresholded mean."""

from __future__ import annotations

from typing import Sequence, Union

from ..tensor.autograd import ContractError

ANLS_TAU = 0.5


def normalize(s: str) -> str:
    return " ".join(s.split()).lower()


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nls(prediction: str, reference: str) -> float:
    p, r = normalize(prediction), normalize(reference)
    longest = max(len(p), len(r))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(p, r) / longest


def exact_match(prediction: str, reference: str) -> bool:
    return normalize(prediction) == normalize(reference)


Reference = Union[str, Sequence[str]]


def sample_anls(prediction: str, references: Reference, tau: float = ANLS_TAU) -> float:
    refs = [references] if isinstance(references, str) else list(references)
    if not refs:
        raise ContractError("a sample needs at least one reference")
    best = max(nls(prediction, r) for r in refs)
    return best if best >= tau else 0.0


def anls(predictions: Sequence[str], references: Sequence[Reference], tau: float = ANLS_TAU) -> float:
    if len(predictions) != len(references):
        raise ContractError(f"{len(predictions)} predictions vs {len(references)} references")
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    if not predictions:
        return 0.0
    return sum(sample_anls(p, r, tau) for p, r in zip(predictions, references)) / len(predictions)
