from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .generate import Example, TASKS

SPLIT_NAMES = ("interp", "selection", "evaluation")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    interp: float = 0.2
    selection: float = 0.2
    evaluation: float = 0.6

    def fractions(self) -> tuple[float, float, float]:
        f = (self.interp, self.selection, self.evaluation)
        if any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
            raise SplitError(f"split fractions must be positive and sum to 1, got {f}")
        return f


def _largest_remainder(n: int, fracs: Sequence[float]) -> np.ndarray:
    raw = np.array(fracs) * n
    out = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - out), kind="stable")[: n - out.sum()]:
        out[i] += 1
    return out


def split(dataset: Sequence[Example], spec: SplitSpec = SplitSpec(), seed: int = 0) -> dict[str, list[Example]]:
    """Stratified three-way split.

    Overall sizes are fixed first by largest remainder; each task kind then
    receives its per-subset share, with leftover items assigned to whichever
    subset is furthest below its overall target. Order inside each subset
    follows the original dataset order.
    """
    fracs = spec.fractions()
    totals = _largest_remainder(len(dataset), fracs)
    rng = np.random.default_rng(seed)
    by_task: dict[str, list[int]] = {}
    for i, ex in enumerate(dataset):
        by_task.setdefault(ex.task, []).append(i)
    kinds = [t for t in TASKS if t in by_task] + sorted(set(by_task) - set(TASKS))
    alloc = {t: np.floor(np.array(fracs) * len(by_task[t]) + 1e-9).astype(int) for t in kinds}
    filled = sum(alloc.values())
    # hand out each kind's remainder to the subset with the largest deficit
    for t in kinds:
        given = np.zeros(3, dtype=bool)
        for _ in range(len(by_task[t]) - int(alloc[t].sum())):
            deficit = np.where(given, np.iinfo(np.int64).min, totals - filled)
            j = int(np.argmax(deficit))
            given[j] = True
            alloc[t][j] += 1
            filled[j] += 1
    parts: list[list[int]] = [[], [], []]
    for t in kinds:
        idx = np.array(by_task[t])[rng.permutation(len(by_task[t]))]
        bounds = np.cumsum(alloc[t])
        for j, chunk in enumerate(np.split(idx, bounds[:-1])):
            parts[j].extend(int(i) for i in chunk)
    return {name: [dataset[i] for i in sorted(p)] for name, p in zip(SPLIT_NAMES, parts)}
