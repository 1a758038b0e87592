"""Synthetic glyph-grid documents with one question each.

Four task kinds:

* ``transcription`` - a single left-aligned line; "what is written?"
* ``keyword``       - typed fields (date, code, name, title) on separate lines,
                      no labels; "what is the date?"
* ``keyvalue``      - ``key: value`` lines; "what is k7?"
* ``casing``        - key-value documents asked in capitals; "WHAT IS K7?"

Every line starts at column 0 and occupies its own row.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .vocab import ANSWER, BLANK, EOS, QSTART, VOCAB_USED, detokenize, encode_text, glyph_ids

TASKS = ("transcription", "keyword", "keyvalue", "casing")
KEYWORD_KINDS = ("date", "code", "name", "title")


class GenerationError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str
    key: str
    value: str
    row: int
    col: int  # first column of the value span
    span: int  # value length in glyphs

    def to_dict(self) -> dict:
        return {"kind": self.kind, "key": self.key, "value": self.value, "row": self.row, "col": self.col, "span": self.span}

    @classmethod
    def from_dict(cls, d: dict) -> "Field":
        return cls(d["kind"], d["key"], d["value"], int(d["row"]), int(d["col"]), int(d["span"]))


@dataclass
class SynthDoc:
    doc_id: str
    grid: np.ndarray
    fields: list[Field]
    task: str

    def line(self, row: int) -> str:
        return detokenize(self.grid[row]).rstrip()

    def value_of(self, key: str) -> Optional[str]:
        for f in self.fields:
            if f.key == key:
                return f.value
        return None


@dataclass
class QAPair:
    question: str
    answer: str
    doc_id: str

    @property
    def question_tokens(self) -> list[int]:
        return encode_text(self.question)

    @property
    def answer_tokens(self) -> list[int]:
        return glyph_ids(self.answer)


@dataclass
class Example:
    doc: SynthDoc
    qa: QAPair

    @property
    def task(self) -> str:
        return self.doc.task


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate: document count, task mix weights and the key/value word classes."""

    n_docs: int = 400
    mix: tuple[tuple[str, float], ...] = (("transcription", 1.0), ("keyword", 1.0), ("keyvalue", 1.0), ("casing", 1.0))
    n_keys: int = 8
    n_values: int = 8
    pairs_min: int = 3
    pairs_max: int = 5
    grid_rows: int = 12
    grid_cols: int = 12
    vocab_size: int = 128
    id_prefix: str = "d"

    def counts(self) -> dict[str, int]:
        """Exact per-task counts by largest remainder."""
        weights = dict(self.mix)
        unknown = set(weights) - set(TASKS)
        if unknown:
            raise GenerationError(f"unknown task kinds {sorted(unknown)}")
        total_w = sum(weights.values())
        if self.n_docs <= 0 or total_w <= 0 or any(w < 0 for w in weights.values()):
            raise GenerationError("counts and mix weights must be positive")
        raw = {k: self.n_docs * w / total_w for k, w in weights.items()}
        counts = {k: int(np.floor(v)) for k, v in raw.items()}
        short = self.n_docs - sum(counts.values())
        for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), TASKS.index(k)))[:short]:
            counts[k] += 1
        return counts

    def keys(self) -> list[str]:
        return [f"k{i}" for i in range(self.n_keys)]

    def values(self) -> list[str]:
        return [f"v{i}" for i in range(self.n_values)]


def _blank_grid(spec: DatasetSpec) -> np.ndarray:
    return np.full((spec.grid_rows, spec.grid_cols), BLANK, dtype=np.int64)


def _write_line(grid: np.ndarray, row: int, text: str) -> None:
    if len(text) > grid.shape[1]:
        raise GenerationError(f"line {text!r} does not fit in {grid.shape[1]} columns")
    grid[row, :] = BLANK
    grid[row, : len(text)] = glyph_ids(text)


def _word(rng: np.random.Generator, alphabet: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n))


def _keyword_value(rng: np.random.Generator, kind: str) -> str:
    d = string.digits
    if kind == "date":
        return _word(rng, d, 2, 2) + "-" + _word(rng, d, 2, 2)
    if kind == "code":
        return "#" + _word(rng, d, 3, 3)
    if kind == "name":
        return _word(rng, string.ascii_uppercase, 1, 1) + _word(rng, string.ascii_lowercase, 2, 4)
    if kind == "title":
        return _word(rng, string.ascii_uppercase, 3, 5)
    raise GenerationError(f"unknown field kind {kind!r}")


TRANSCRIPTION_ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits


def _make_doc(task: str, doc_id: str, spec: DatasetSpec, rng: np.random.Generator) -> Example:
    grid = _blank_grid(spec)
    rows = rng.permutation(spec.grid_rows)
    fields: list[Field] = []
    if task == "transcription":
        word = _word(rng, TRANSCRIPTION_ALPHABET, 2, 5)
        r = int(rows[0])
        _write_line(grid, r, word)
        fields.append(Field("text", "", word, r, 0, len(word)))
        question, answer = "what is written?", word
    elif task == "keyword":
        n = int(rng.integers(3, len(KEYWORD_KINDS) + 1))
        kinds = [KEYWORD_KINDS[int(i)] for i in rng.permutation(len(KEYWORD_KINDS))[:n]]
        for kind, r in zip(kinds, rows):
            value = _keyword_value(rng, kind)
            _write_line(grid, int(r), value)
            fields.append(Field(kind, "", value, int(r), 0, len(value)))
        target = fields[int(rng.integers(0, len(fields)))]
        question, answer = f"what is the {target.kind}?", target.value
    elif task in ("keyvalue", "casing"):
        keys, values = spec.keys(), spec.values()
        n = int(rng.integers(spec.pairs_min, spec.pairs_max + 1))
        if n > len(keys) or n > len(values):
            raise GenerationError(f"{n} pairs need at least {n} keys and values")
        ks = [keys[int(i)] for i in rng.permutation(len(keys))[:n]]
        vs = [values[int(i)] for i in rng.permutation(len(values))[:n]]
        for k, v, r in zip(ks, vs, rows):
            _write_line(grid, int(r), f"{k}: {v}")
            fields.append(Field("pair", k, v, int(r), len(k) + 2, len(v)))
        target = fields[int(rng.integers(0, len(fields)))]
        question = f"what is {target.key}?"
        if task == "casing":
            question = question.upper()
        answer = target.value
    else:
        raise GenerationError(f"unknown task kind {task!r}")
    return Example(SynthDoc(doc_id, grid, fields, task), QAPair(question, answer, doc_id))


def gen_dataset(spec: DatasetSpec, seed: int) -> list[Example]:
    """Deterministic in ``(spec, seed)``; task counts follow :meth:`DatasetSpec.counts` exactly."""
    if spec.vocab_size < VOCAB_USED:
        raise GenerationError(f"vocab_size={spec.vocab_size} cannot hold {VOCAB_USED} glyph and special tokens")
    longest_kv = max(len(k) for k in spec.keys()) + 2 + max(len(v) for v in spec.values())
    if longest_kv > spec.grid_cols or spec.grid_cols < 5:
        raise GenerationError(f"lines of up to {max(longest_kv, 5)} glyphs do not fit {spec.grid_cols} columns")
    if spec.pairs_max > spec.grid_rows or len(KEYWORD_KINDS) > spec.grid_rows:
        raise GenerationError("grid has too few rows")
    counts = spec.counts()
    rng = np.random.default_rng(seed)
    order = [t for t in TASKS for _ in range(counts.get(t, 0))]
    order = [order[int(i)] for i in rng.permutation(len(order))]
    width = max(5, len(str(len(order))))
    return [_make_doc(task, f"{spec.id_prefix}{i:0{width}d}", spec, rng) for i, task in enumerate(order)]


# ---------------------------------------------------------------- corruption


def _derangement_biased(rng: np.random.Generator, n: int, tries: int = 8) -> np.ndarray:
    """A non-identity permutation; the first fixed-point-free draw among ``tries`` wins."""
    ident = np.arange(n)
    last = None
    for _ in range(tries * 4):
        p = rng.permutation(n)
        if np.array_equal(p, ident):
            continue
        last = p
        tries -= 1
        if not np.any(p == ident) or tries <= 0:
            return p
    return last if last is not None else np.roll(ident, 1)


def corrupt_keyvalue(doc: SynthDoc, seed: int, move_keys: bool = False) -> SynthDoc:
    """Reassign values to different keys on the same lines.

    Keys stay where they are and the value multiset is permuted so that at
    least one value moves. With ``move_keys`` the keys are also permuted over
    the same lines, which separates "what sits at the old position" from "what
    the key now maps to".
    """
    pairs = [f for f in doc.fields if f.kind == "pair"]
    if doc.task not in ("keyvalue", "casing") or len(pairs) < 2:
        raise CorruptionError(f"{doc.doc_id}: need a key-value document with at least 2 pairs")
    rng = np.random.default_rng(seed)
    n = len(pairs)
    vperm = _derangement_biased(rng, n)
    kperm = _derangement_biased(rng, n) if move_keys else np.arange(n)
    grid = doc.grid.copy()
    new_fields = []
    for i, f in enumerate(pairs):
        key = pairs[int(kperm[i])].key
        value = pairs[int(vperm[i])].value
        col = len(key) + 2
        if move_keys:
            _write_line(grid, f.row, f"{key}: {value}")
        else:
            grid[f.row, f.col : f.col + f.span] = BLANK
            grid[f.row, col : col + len(value)] = glyph_ids(value)
        new_fields.append(Field("pair", key, value, f.row, col, len(value)))
    return SynthDoc(doc.doc_id + "~c", grid, new_fields, doc.task)


# ---------------------------------------------------------------- prompts


@dataclass
class PromptEncoding:
    tokens: list[int]
    loss_mask: list[bool]  # True where the token is an answer token or the final EOS

    @property
    def prompt(self) -> list[int]:
        """Tokens up to and including ``<s_answer>`` (the generation prompt)."""
        return self.tokens[: self.tokens.index(ANSWER) + 1]


def encode_prompt(qa: QAPair, max_len: Optional[int] = None, with_answer: bool = True) -> PromptEncoding:
    q = [QSTART] + qa.question_tokens + [ANSWER]
    a = qa.answer_tokens + [EOS] if with_answer else []
    toks = q + a
    if max_len is not None and len(toks) > max_len:
        raise LengthError(f"prompt for {qa.doc_id} has {len(toks)} tokens > {max_len}")
    return PromptEncoding(toks, [False] * len(q) + [True] * len(a))
