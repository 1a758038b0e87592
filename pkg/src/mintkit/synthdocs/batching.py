from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .generate import Example, encode_prompt
from .vocab import PAD


@dataclass
class Batch:
    """Right-padded teacher-forcing arrays: ``inputs[:, t]`` predicts ``targets[:, t]``."""

    grids: np.ndarray  # (B, R, C)
    inputs: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    loss_mask: np.ndarray  # (B, T) bool
    prompt_lens: np.ndarray  # (B,) length of the prompt ending in <s_answer>
    tasks: list[str]

    def __len__(self) -> int:
        return len(self.tasks)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            self.grids[idx], self.inputs[idx], self.targets[idx], self.loss_mask[idx], self.prompt_lens[idx],
            [self.tasks[int(i)] for i in idx],
        )


def collate(examples: Sequence[Example], max_len: int | None = None) -> Batch:
    encs = [encode_prompt(ex.qa, max_len) for ex in examples]
    width = max(len(e.tokens) for e in encs) - 1
    b = len(examples)
    inputs = np.full((b, width), PAD, dtype=np.int64)
    targets = np.full((b, width), PAD, dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    for i, e in enumerate(encs):
        n = len(e.tokens) - 1
        inputs[i, :n] = e.tokens[:-1]
        targets[i, :n] = e.tokens[1:]
        mask[i, :n] = e.loss_mask[1:]
    grids = np.stack([ex.doc.grid for ex in examples])
    plens = np.array([len(e.prompt) for e in encs])
    return Batch(grids, inputs, targets, mask, plens, [ex.task for ex in examples])
