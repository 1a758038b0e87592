"""Line-delimited dataset records and split manifests.

One JSON object per line, keys in this order::

    version, id, dims, grid, fields, question, answer, task

``grid`` is the row-major token ids joined by single spaces, ``dims`` is
``[rows, cols]``, ``question`` / ``answer`` are token-id lists (answer in
glyph form, question in shift form) and ``fields`` is the annotation list.
A manifest is a text file with one document id per line.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .generate import Example, Field, QAPair, SynthDoc
from .vocab import detokenize

RECORD_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def example_to_record(ex: Example) -> dict:
    d = ex.doc
    return {
        "version": RECORD_VERSION,
        "id": d.doc_id,
        "dims": [int(d.grid.shape[0]), int(d.grid.shape[1])],
        "grid": " ".join(str(int(t)) for t in d.grid.reshape(-1)),
        "fields": [f.to_dict() for f in d.fields],
        "question": ex.qa.question_tokens,
        "answer": ex.qa.answer_tokens,
        "task": d.task,
    }


def record_to_example(rec: dict) -> Example:
    if rec.get("version") != RECORD_VERSION:
        raise DatasetFormatError(f"record {rec.get('id')!r}: unsupported version {rec.get('version')!r}")
    rows, cols = rec["dims"]
    grid = np.array([int(t) for t in rec["grid"].split()], dtype=np.int64)
    if grid.size != rows * cols:
        raise DatasetFormatError(f"record {rec['id']!r}: grid has {grid.size} cells, dims say {rows}x{cols}")
    doc = SynthDoc(rec["id"], grid.reshape(rows, cols), [Field.from_dict(f) for f in rec["fields"]], rec["task"])
    qa = QAPair(detokenize(rec["question"]), detokenize(rec["answer"]), rec["id"])
    if qa.question_tokens != list(rec["question"]) or qa.answer_tokens != list(rec["answer"]):
        raise DatasetFormatError(f"record {rec['id']!r}: token ids do not round-trip through the tokenizer")
    return Example(doc, qa)


def dumps_record(ex: Example) -> str:
    return json.dumps(example_to_record(ex), separators=(",", ":"))


def save_dataset(path, examples: Iterable[Example]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(dumps_record(ex) + "\n")
    return path


def load_dataset(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            out.append(record_to_example(rec))
    return out


def save_manifest(path, examples: Sequence[Example]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(ex.doc.doc_id + "\n" for ex in examples), encoding="utf-8")
    return path


def load_manifest(path, examples: Sequence[Example]) -> list[Example]:
    by_id = {ex.doc.doc_id: ex for ex in examples}
    ids = [s for s in Path(path).read_text(encoding="utf-8").splitlines() if s]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DatasetFormatError(f"{path}: {len(missing)} ids not in dataset, first {missing[0]!r}")
    return [by_id[i] for i in ids]
