"""Closed-form parameter and FLOP accounting for the decoder.

FLOPs follow one of four conventions, ``{mac1, mac2} x {kv-cache, no-cache}``:

* ``mac1`` counts one operation per multiply-accumulate, ``mac2`` two.
* ``no-cache`` recomputes the whole sequence for every generated token
  (``m`` passes over lengths ``n .. n+m-1``), including cross-attention keys
  and values over the patches.
* ``kv-cache`` runs one pass over the ``n`` prompt tokens, then ``m - 1``
  single-token steps; patch keys and values are projected once.

Bias additions, norms, softmax and activation functions are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from ..model.config import MiniModelConfig
from ..model.ids import HeadId, MaskSet, SublayerId, sublayers
from ..model.network import SublayerArch

CONVENTIONS = ("mac1/no-cache", "mac1/kv-cache", "mac2/no-cache", "mac2/kv-cache")

# Reference values (per decoder layer) being reproduced by the Donut-base configuration.
REFERENCE_TABLE = {
    "params": {"self_attention": 4e6, "cross_attention": 4e6, "feed_forward": 8e6, "embedding": 59e6, "decoder": 64e6},
    "flops": {"self_attention": 8.58e9, "cross_attention": 366.11e9, "feed_forward": 16.69e9, "unembedding": 117.17e9},
}


class ConventionError(ValueError):
    pass


@dataclass(frozen=True)
class CostRow:
    module: str
    params: int
    flops: int = 0


@dataclass
class CostTable:
    rows: list[CostRow]
    convention: str = ""
    n: int = 0
    m: int = 0
    n_patches: int = 0
    notes: list[str] = field(default_factory=list)

    def row(self, module: str) -> CostRow:
        for r in self.rows:
            if r.module == module:
                return r
        raise KeyError(module)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def decoder_rows(self) -> list[CostRow]:
        return [r for r in self.rows if r.module.startswith("decoder.")]

    @property
    def decoder_params(self) -> int:
        return sum(r.params for r in self.decoder_rows())

    @property
    def decoder_flops(self) -> int:
        return sum(r.flops for r in self.decoder_rows())

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "n": self.n,
            "m": self.m,
            "n_patches": self.n_patches,
            "rows": [{"module": r.module, "params": r.params, "flops": r.flops} for r in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "decoder_params": self.decoder_params,
            "decoder_flops": self.decoder_flops,
            "notes": list(self.notes),
        }


def _kept_heads(cfg: MiniModelConfig, sid: SublayerId, masks: MaskSet, arch: Optional[Mapping[SublayerId, SublayerArch]]) -> int:
    heads = arch[sid].heads if arch is not None else tuple(range(cfg.n_heads))
    return sum(1 for h in heads if masks.keeps_head(HeadId(sid, h)))


def _present(sid: SublayerId, masks: MaskSet, arch) -> bool:
    return masks.keeps_sublayer(sid) and (arch is None or arch[sid].present)


def sublayer_params(cfg: MiniModelConfig, sid: SublayerId, masks: MaskSet = MaskSet(), arch=None) -> int:
    """Parameters of one sub-layer including its norm; zero when dropped."""
    if not _present(sid, masks, arch):
        return 0
    d = cfg.d_model
    if sid.kind == "M":
        return 2 * d * cfg.d_ff + d + cfg.d_ff + 2 * d
    a = _kept_heads(cfg, sid, masks, arch) * cfg.d_head
    if a == 0:
        return 0
    # q, k, v: d x a + a each; out: a x d + d; norm: 2d
    return 4 * d * a + 3 * a + d + 2 * d


def count_params(cfg: MiniModelConfig, masks: Optional[MaskSet] = None, arch=None) -> CostTable:
    """Per-tensor-group parameter counts; decoder rows are one per sub-layer."""
    masks = masks or MaskSet.identity()
    d, v = cfg.d_model, cfg.vocab_size
    enc = (v + cfg.grid_rows + cfg.grid_cols) * d
    if cfg.encoder_attention:
        enc += 4 * d * d + 4 * d + 2 * d
    rows = [
        CostRow("encoder", enc),
        CostRow("embedding", v * d),
        CostRow("positions", cfg.max_prompt * d),
        CostRow("unembedding", v * d),
    ]
    rows += [CostRow(f"decoder.{s}", sublayer_params(cfg, s, masks, arch)) for s in sublayers(cfg.n_layers)]
    notes = ["unembedding is tied to the embedding (shared storage)"] if cfg.tie_unembedding else []
    return CostTable(rows, notes=notes)


# ---------------------------------------------------------------- FLOPs


def _parse(convention: str) -> tuple[int, bool]:
    if convention not in CONVENTIONS:
        raise ConventionError(f"unknown FLOPs convention {convention!r}; choose from {CONVENTIONS}")
    mac, cache = convention.split("/")
    return (1 if mac == "mac1" else 2), cache == "kv-cache"


def _passes(n: int, m: int, cache: bool) -> list[tuple[int, int]]:
    """``(new tokens, context length)`` per decoder pass."""
    if m <= 0 or n + m == 0:
        return []
    if not cache:
        return [(n + i, n + i) for i in range(m)]
    return [(n, n)] + [(1, n + i) for i in range(1, m)]


def sublayer_flops(cfg: MiniModelConfig, sid: SublayerId, n: int, m: int, n_patches: int, convention: str, masks: MaskSet = MaskSet(), arch=None) -> int:
    mac, cache = _parse(convention)
    if not _present(sid, masks, arch):
        return 0
    d = cfg.d_model
    passes = _passes(n, m, cache)
    total = 0
    if sid.kind == "M":
        total = sum(2 * t * d * cfg.d_ff for t, _ in passes)
    else:
        a = _kept_heads(cfg, sid, masks, arch) * cfg.d_head
        for t, ctx in passes:
            if sid.kind == "S":
                # q/k/v/out projections of the new tokens, scores and weighted sum over the context
                total += 4 * t * d * a + 2 * t * ctx * a
            else:
                total += 2 * t * d * a + 2 * t * n_patches * a
                if not cache:
                    total += 2 * n_patches * d * a
        if cache and passes and sid.kind == "C":
            total += 2 * n_patches * d * a
    return mac * total


def count_flops(
    cfg: MiniModelConfig,
    masks: Optional[MaskSet] = None,
    n: int = 42,
    m: int = 35,
    n_patches: Optional[int] = None,
    convention: str = "mac1/no-cache",
    arch=None,
) -> CostTable:
    masks = masks or MaskSet.identity()
    mac, cache = _parse(convention)
    p = cfg.n_patches if n_patches is None else n_patches
    d, v = cfg.d_model, cfg.vocab_size
    params = {r.module: r.params for r in count_params(cfg, masks, arch).rows}
    ctx = cfg.grid_cols if cfg.encoder_window == "row" else p
    enc_flops = mac * (4 * p * d * d + 2 * p * ctx * d) if cfg.encoder_attention and m > 0 else 0
    unembed = mac * sum(t * d * v for t, _ in _passes(n, m, cache))
    rows = [
        CostRow("encoder", params["encoder"], enc_flops),
        CostRow("embedding", params["embedding"], 0),
        CostRow("positions", params["positions"], 0),
        CostRow("unembedding", params["unembedding"], unembed),
    ]
    for s in sublayers(cfg.n_layers):
        rows.append(CostRow(f"decoder.{s}", params[f"decoder.{s}"], sublayer_flops(cfg, s, n, m, p, convention, masks, arch)))
    return CostTable(rows, convention, n, m, p)


def rel_err(value: float, ref: float) -> float:
    return abs(value - ref) / abs(ref)


@dataclass
class ConventionReport:
    tables: dict[str, CostTable]
    errors: dict[str, dict[str, float]]  # convention -> {row: relative error vs reference}
    best: str
    matching: list[str]
    tol: float

    def to_dict(self) -> dict:
        return {
            "best": self.best,
            "matching": self.matching,
            "tol": self.tol,
            "errors": self.errors,
            "per_layer": {
                c: {k: float(_per_layer(t)[k]) for k in ("self_attention", "cross_attention", "feed_forward", "unembedding")}
                for c, t in self.tables.items()
            },
            "reference": REFERENCE_TABLE["flops"],
            "discrepancy": None if self.matching else "no convention places both attention rows within tolerance",
        }


def _per_layer(t: CostTable, layer: int = 0) -> dict[str, int]:
    return {
        "self_attention": t.row(f"decoder.S{layer}").flops,
        "cross_attention": t.row(f"decoder.C{layer}").flops,
        "feed_forward": t.row(f"decoder.M{layer}").flops,
        "unembedding": t.row("unembedding").flops,
    }


def convention_report(cfg: MiniModelConfig, n: int = 42, m: int = 35, n_patches: int = 4800, tol: float = 0.25) -> ConventionReport:
    """All four conventions on ``cfg``; a convention matches when both attention rows are within ``tol``."""
    ref = REFERENCE_TABLE["flops"]
    tables, errors, matching = {}, {}, []
    for c in CONVENTIONS:
        t = count_flops(cfg, n=n, m=m, n_patches=n_patches, convention=c)
        tables[c] = t
        per = _per_layer(t)
        errors[c] = {k: rel_err(per[k], ref[k]) for k in ref}
        if errors[c]["self_attention"] <= tol and errors[c]["cross_attention"] <= tol:
            matching.append(c)
    best = min(CONVENTIONS, key=lambda c: (max(errors[c]["self_attention"], errors[c]["cross_attention"]), CONVENTIONS.index(c)))
    return ConventionReport(tables, errors, best, matching, tol)


def param_report(cfg: MiniModelConfig) -> dict[str, dict[str, float]]:
    """Parameter rows against the reference table (per-layer rows use layer 0)."""
    t = count_params(cfg)
    ours = {
        "self_attention": t.row("decoder.S0").params,
        "cross_attention": t.row("decoder.C0").params,
        "feed_forward": t.row("decoder.M0").params,
        "embedding": t.row("embedding").params,
        "decoder": t.decoder_params,
    }
    ref = REFERENCE_TABLE["params"]
    return {k: {"value": float(ours[k]), "reference": ref[k], "rel_err": rel_err(ours[k], ref[k])} for k in ref}
