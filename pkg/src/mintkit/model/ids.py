"""Names for decoder sub-layers, heads and activation sites (``S0``, ``C3.H11``, ``C3.query``)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional

from ..tensor.autograd import ParameterError

KINDS = ("S", "C", "M")
KIND_NAMES = {"S": "self-attention", "C": "cross-attention", "M": "feed-forward"}

ATTN_SITES = ("input", "normed", "query", "key", "value", "attn", "av", "output", "resid_post")
FF_SITES = ("input", "normed", "hidden", "output", "resid_post")
GLOBAL_SITES = ("embed", "final")


@dataclass(frozen=True, order=True)
class SublayerId:
    layer: int
    kind_order: int

    @classmethod
    def make(cls, kind: str, layer: int) -> "SublayerId":
        if kind not in KINDS:
            raise ParameterError(f"unknown sub-layer kind {kind!r}")
        return cls(layer, KINDS.index(kind))

    @classmethod
    def parse(cls, name: str) -> "SublayerId":
        m = re.fullmatch(r"([SCM])(\d+)", name)
        if not m:
            raise ParameterError(f"not a sub-layer name: {name!r}")
        return cls.make(m.group(1), int(m.group(2)))

    @property
    def kind(self) -> str:
        return KINDS[self.kind_order]

    @property
    def is_attention(self) -> bool:
        return self.kind != "M"

    def __str__(self) -> str:
        return f"{self.kind}{self.layer}"

    def __repr__(self) -> str:
        return f"SublayerId({self})"


@dataclass(frozen=True, order=True)
class HeadId:
    sublayer: SublayerId
    head: int

    def __post_init__(self):
        if not self.sublayer.is_attention:
            raise ParameterError(f"{self.sublayer} is not an attention sub-layer")

    @classmethod
    def parse(cls, name: str) -> "HeadId":
        m = re.fullmatch(r"([SC]\d+)\.H(\d+)", name)
        if not m:
            raise ParameterError(f"not a head name: {name!r}")
        return cls(SublayerId.parse(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"{self.sublayer}.H{self.head}"

    def __repr__(self) -> str:
        return f"HeadId({self})"


def sublayers(n_layers: int) -> list[SublayerId]:
    """All sub-layers in execution order: S0, C0, M0, S1, ..."""
    return [SublayerId(layer, k) for layer in range(n_layers) for k in range(3)]


def parse_site(site: str) -> tuple[Optional[SublayerId], str]:
    if site in GLOBAL_SITES:
        return None, site
    head, _, what = site.partition(".")
    sid = SublayerId.parse(head)
    allowed = ATTN_SITES if sid.is_attention else FF_SITES
    if what not in allowed:
        raise ParameterError(f"unknown activation site {site!r}")
    return sid, what


def site(sid: SublayerId, what: str) -> str:
    return f"{sid}.{what}"


@dataclass(frozen=True)
class MaskSet:
    """Keep/drop flags over sub-layers and heads; anything not listed is kept."""

    dropped_sublayers: frozenset = frozenset()
    dropped_heads: frozenset = frozenset()

    @classmethod
    def identity(cls) -> "MaskSet":
        return cls()

    @classmethod
    def drop(cls, sublayers: Iterable = (), heads: Iterable = ()) -> "MaskSet":
        subs = frozenset(s if isinstance(s, SublayerId) else SublayerId.parse(s) for s in sublayers)
        hs = frozenset(h if isinstance(h, HeadId) else HeadId.parse(h) for h in heads)
        return cls(subs, hs)

    def keeps_sublayer(self, sid: SublayerId) -> bool:
        return sid not in self.dropped_sublayers

    def keeps_head(self, hid: HeadId) -> bool:
        return hid.sublayer not in self.dropped_sublayers and hid not in self.dropped_heads

    @property
    def is_identity(self) -> bool:
        return not self.dropped_sublayers and not self.dropped_heads

    def with_dropped(self, sublayers: Iterable = (), heads: Iterable = ()) -> "MaskSet":
        extra = MaskSet.drop(sublayers, heads)
        return MaskSet(self.dropped_sublayers | extra.dropped_sublayers, self.dropped_heads | extra.dropped_heads)

    def sublayer_keep(self, all_sublayers: Iterable[SublayerId]) -> dict[SublayerId, bool]:
        return {s: self.keeps_sublayer(s) for s in all_sublayers}

    def head_keep(self, all_heads: Iterable[HeadId]) -> dict[HeadId, bool]:
        return {h: self.keeps_head(h) for h in all_heads}

    def to_dict(self) -> dict:
        return {
            "dropped_sublayers": [str(s) for s in sorted(self.dropped_sublayers)],
            "dropped_heads": [str(h) for h in sorted(self.dropped_heads)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        return cls.drop(d.get("dropped_sublayers", ()), d.get("dropped_heads", ()))
