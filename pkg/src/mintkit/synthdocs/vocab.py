"""Glyph vocabulary and the prompt tokenizer.

Grid cells and answers use one token per glyph, in both letter cases. Prompt
text (questions) is tokenized with an uppercase-shift marker: ``"A"`` becomes
``<shift> a``. Detokenization inverts both forms.
"""

from __future__ import annotations

import string
from typing import Iterable, Sequence

PAD = 0
EOS = 1
QSTART = 2
ANSWER = 3  # <s_answer>
SHIFT = 4

SPECIAL_NAMES = {PAD: "<pad>", EOS: "</s>", QSTART: "<s_question>", ANSWER: "<s_answer>", SHIFT: "<shift>"}
N_SPECIAL = len(SPECIAL_NAMES)

GLYPHS = " :-?.#" + string.digits + string.ascii_lowercase + string.ascii_uppercase
GLYPH_ID = {ch: N_SPECIAL + i for i, ch in enumerate(GLYPHS)}
ID_GLYPH = {i: ch for ch, i in GLYPH_ID.items()}
BLANK = GLYPH_ID[" "]
VOCAB_USED = N_SPECIAL + len(GLYPHS)


class TokenizerError(ValueError):
    pass


def glyph_ids(text: str) -> list[int]:
    """One token per character, preserving case (grid / answer form)."""
    try:
        return [GLYPH_ID[ch] for ch in text]
    except KeyError as e:
        raise TokenizerError(f"character {e.args[0]!r} is not a glyph") from None


def encode_text(text: str) -> list[int]:
    """Prompt form: uppercase letters become ``SHIFT`` + lowercase glyph."""
    out: list[int] = []
    for ch in text:
        if ch in string.ascii_uppercase:
            out.append(SHIFT)
            ch = ch.lower()
        if ch not in GLYPH_ID:
            raise TokenizerError(f"character {ch!r} is not a glyph")
        out.append(GLYPH_ID[ch])
    return out


def detokenize(ids: Iterable[int]) -> str:
    """Glyphs map 1:1 to characters; ``SHIFT`` uppercases the next glyph; other specials are dropped."""
    chars: list[str] = []
    shift = False
    for t in ids:
        t = int(t)
        if t == SHIFT:
            shift = True
            continue
        ch = ID_GLYPH.get(t)
        if ch is None:
            shift = False
            continue
        chars.append(ch.upper() if shift else ch)
        shift = False
    return "".join(chars)


def render(ids: Sequence[int]) -> str:
    """Debug rendering that keeps special tokens visible."""
    return "".join(SPECIAL_NAMES.get(int(t), ID_GLYPH.get(int(t), f"<{int(t)}>")) for t in ids)
