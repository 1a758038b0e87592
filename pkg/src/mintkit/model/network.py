"""The toy Donut analog: per-cell patch encoder and a pre-norm multimodal decoder.

Every decoder layer runs three residual sub-layers in order: self-attention
(``S``), cross-attention over the patch encodings (``C``) and a feed-forward
block (``M``). Sub-layers and individual heads can be masked, activations can
be captured or overwritten at named sites, and sub-layers / heads can be
physically removed (see :mod:`mintkit.compress.surgery`), which is why the
per-sub-layer architecture is stored alongside the parameters.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from ..tensor.autograd import ContractError, DimensionError, ParameterError
from ..synthdocs.vocab import EOS, PAD
from .config import MiniModelConfig
from .ids import HeadId, MaskSet, SublayerId, parse_site, site, sublayers

PatchValue = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class PatchError(ValueError):
    pass


@dataclass
class SublayerArch:
    present: bool = True
    heads: tuple[int, ...] = ()


@dataclass
class ActivationTrace:
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    logits: Optional[np.ndarray] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.activations[name]

    def __contains__(self, name: str) -> bool:
        return name in self.activations


def _sub_prefix(sid: SublayerId) -> str:
    return f"decoder.L{sid.layer}.{sid.kind}"


class MiniModel:
    def __init__(self, config: MiniModelConfig, params: dict[str, Tensor], arch: dict[SublayerId, SublayerArch], seed: int):
        self.config = config
        self.params = params
        self.arch = arch
        self.seed = seed

    # ------------------------------------------------------------ structure

    def all_sublayers(self) -> list[SublayerId]:
        return sublayers(self.config.n_layers)

    def present_sublayers(self) -> list[SublayerId]:
        return [s for s in self.all_sublayers() if self.arch[s].present]

    def heads_of(self, sid: SublayerId) -> list[HeadId]:
        a = self.arch[sid]
        if not sid.is_attention or not a.present:
            return []
        return [HeadId(sid, h) for h in a.heads]

    def all_heads(self) -> list[HeadId]:
        return [h for s in self.present_sublayers() for h in self.heads_of(s)]

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params) if k.startswith(prefix)]

    def decoder_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters("decoder.")]

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.size for _, t in self.named_parameters(prefix)))

    @property
    def embedding(self) -> Tensor:
        return self.params["embed.tokens.weight"]

    def unembedding_matrix(self) -> np.ndarray:
        """``(d_model, vocab)``; a transposed view of the embedding when tied."""
        if self.config.tie_unembedding:
            return self.embedding.data.T
        return self.params["unembed.weight"].data

    def copy(self) -> "MiniModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return MiniModel(self.config, params, copy.deepcopy(self.arch), self.seed)

    def identity_masks(self) -> MaskSet:
        return MaskSet.identity()

    # ------------------------------------------------------------ encoder

    def encode(self, grid) -> Tensor:
        """Patch encodings ``(n_patches, d)`` for one grid or ``(B, n_patches, d)`` for a batch."""
        g = np.asarray(grid, dtype=np.int64)
        single = g.ndim == 2
        if single:
            g = g[None]
        cfg = self.config
        if g.ndim != 3 or g.shape[1:] != (cfg.grid_rows, cfg.grid_cols):
            raise DimensionError(f"encode: grid shape {g.shape[-2:]} != configured ({cfg.grid_rows}, {cfg.grid_cols})")
        b = g.shape[0]
        rows = np.broadcast_to(np.repeat(np.arange(cfg.grid_rows), cfg.grid_cols), (b, cfg.n_patches))
        cols = np.broadcast_to(np.tile(np.arange(cfg.grid_cols), cfg.grid_rows), (b, cfg.n_patches))
        e = T.embedding(self.params["encoder.glyph.weight"], g.reshape(b, -1))
        e = T.add(e, T.embedding(self.params["encoder.row.weight"], rows))
        e = T.add(e, T.embedding(self.params["encoder.col.weight"], cols))
        if cfg.encoder_attention:
            h = self._norm("encoder.attn", e)
            if cfg.encoder_window == "row":
                h = T.reshape(h, (b * cfg.grid_rows, cfg.grid_cols, cfg.d_model))
            a = self._attention_core("encoder.attn", h, h, None, None, None, {}, {}, None, None)
            e = T.add(e, T.reshape(a, (b, cfg.n_patches, cfg.d_model)))
        if single:
            e = T.reshape(e, (cfg.n_patches, cfg.d_model))
        return e

    # ------------------------------------------------------------ decoder

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.norm.gain"], self.params[f"{prefix}.norm.bias"])

    def _attention_core(
        self,
        prefix: str,
        h: Tensor,
        kv: Tensor,
        causal: Optional[np.ndarray],
        head_keep: Optional[np.ndarray],
        sid: Optional[SublayerId],
        patches: Mapping[str, PatchValue],
        trace: dict[str, np.ndarray],
        capture: Optional[set],
        n_heads: Optional[int],
    ) -> Tensor:
        p = self.params
        dh = self.config.d_head
        nh = n_heads if n_heads is not None else self.config.n_heads
        b, tq, _ = h.shape
        tk = kv.shape[1]

        def hook(what: str, t: Tensor) -> Tensor:
            if sid is None:
                return t
            return _apply_hook(site(sid, what), t, patches, trace, capture)

        def heads(x: Tensor, n: int, name: str) -> Tensor:
            y = T.linear(x, p[f"{prefix}.{name}_proj.weight"], p[f"{prefix}.{name}_proj.bias"])
            return T.transpose(T.reshape(y, (b, n, nh, dh)), (0, 2, 1, 3))

        q = hook("query", heads(h, tq, "q"))
        k = hook("key", heads(kv, tk, "k"))
        v = hook("value", heads(kv, tk, "v"))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        attn = hook("attn", T.softmax(scores, axis=-1, mask=causal, scale=1.0 / math.sqrt(dh)))
        av = T.matmul(attn, v)
        if head_keep is not None:
            av = T.apply_mask(av, head_keep.reshape(1, nh, 1, 1))
        av = hook("av", av)
        merged = T.reshape(T.transpose(av, (0, 2, 1, 3)), (b, tq, nh * dh))
        return T.linear(merged, p[f"{prefix}.out_proj.weight"], p[f"{prefix}.out_proj.bias"])

    def _feed_forward(self, prefix: str, h: Tensor, sid: SublayerId, patches, trace, capture) -> Tensor:
        p = self.params
        hidden = T.gelu(T.linear(h, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"]))
        hidden = _apply_hook(site(sid, "hidden"), hidden, patches, trace, capture)
        return T.linear(hidden, p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])

    def decode(
        self,
        patch_enc,
        tokens,
        masks: Optional[MaskSet] = None,
        capture: Iterable[str] = (),
        patches: Optional[Mapping[str, PatchValue]] = None,
    ) -> tuple[Tensor, ActivationTrace]:
        """Teacher-forced decoder pass; returns per-position logits and the captured trace."""
        cfg = self.config
        masks = masks or MaskSet.identity()
        patches = dict(patches or {})
        capture = set(capture)
        for name in capture | set(patches):
            parse_site(name)
        enc = patch_enc if isinstance(patch_enc, Tensor) else Tensor(patch_enc)
        if enc.data.ndim == 2:
            enc = T.reshape(enc, (1,) + enc.shape)
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim == 1:
            tok = tok[None]
        b, tlen = tok.shape
        if enc.shape[0] != b:
            raise DimensionError(f"decode: {enc.shape[0]} patch encodings for {b} token rows")
        if tlen > cfg.max_prompt:
            raise ContractError(f"decode: sequence length {tlen} exceeds max_prompt={cfg.max_prompt}")
        trace: dict[str, np.ndarray] = {}
        positions = np.broadcast_to(np.arange(tlen), (b, tlen))
        x = T.add(T.embedding(self.embedding, tok), T.embedding(self.params["embed.positions.weight"], positions))
        x = _apply_hook("embed", x, patches, trace, capture)
        causal = np.tril(np.ones((tlen, tlen), dtype=bool))[None, None]

        for sid in self.all_sublayers():
            x = _apply_hook(site(sid, "input"), x, patches, trace, capture)
            active = self.arch[sid].present and masks.keeps_sublayer(sid)
            if not active:
                for what in capture:
                    if what.startswith(f"{sid}.") and what not in (site(sid, "input"), site(sid, "output"), site(sid, "resid_post")):
                        raise ParameterError(f"site {what} is unavailable: {sid} is dropped")
                out_name = site(sid, "output")
                if out_name in patches:
                    zero = Tensor(np.zeros(x.shape))
                    x = T.add(x, _apply_hook(out_name, zero, patches, trace, capture))
                elif out_name in capture:
                    trace[out_name] = np.zeros(x.shape)
                x = _apply_hook(site(sid, "resid_post"), x, patches, trace, capture)
                continue
            prefix = _sub_prefix(sid)
            h = _apply_hook(site(sid, "normed"), self._norm(prefix, x), patches, trace, capture)
            if sid.is_attention:
                hs = self.arch[sid].heads
                keep = np.array([masks.keeps_head(HeadId(sid, i)) for i in hs], dtype=np.float64)
                keep_arg = None if keep.all() else keep
                kv = h if sid.kind == "S" else enc
                mask = causal if sid.kind == "S" else None
                f = self._attention_core(prefix, h, kv, mask, keep_arg, sid, patches, trace, capture, len(hs))
            else:
                f = self._feed_forward(prefix, h, sid, patches, trace, capture)
            f = _apply_hook(site(sid, "output"), f, patches, trace, capture)
            x = _apply_hook(site(sid, "resid_post"), T.add(x, f), patches, trace, capture)

        x = _apply_hook("final", x, patches, trace, capture)
        logits = T.linear(x, self._unembed_tensor())
        return logits, ActivationTrace(trace, logits.data)

    def _unembed_tensor(self) -> Tensor:
        if self.config.tie_unembedding:
            return T.transpose(self.embedding, (1, 0))
        return self.params["unembed.weight"]

    # ------------------------------------------------------------ generation

    def generate(
        self,
        patch_enc,
        prompts: Sequence[Sequence[int]],
        max_new: int,
        masks: Optional[MaskSet] = None,
        patches: Optional[Mapping[str, PatchValue]] = None,
        batch_size: int = 256,
    ) -> list[list[int]]:
        """Greedy decoding. Returns each continuation without the final EOS.

        With ``patches`` the whole prompt set is decoded as one batch and every
        row is recomputed at every step, so patch arrays and callables always
        see the full ``(len(prompts), ...)`` layout.
        """
        enc_all = patch_enc.data if isinstance(patch_enc, Tensor) else np.asarray(patch_enc)
        if enc_all.ndim == 2:
            enc_all = enc_all[None]
        if patches:
            batch_size = max(1, len(prompts))
        out: list[list[int]] = []
        with T.no_grad():
            for start in range(0, len(prompts), batch_size):
                chunk = [list(p) for p in prompts[start : start + batch_size]]
                enc = enc_all[start : start + len(chunk)]
                out.extend(self._generate_chunk(enc, chunk, max_new, masks, patches))
        return out

    def _generate_chunk(self, enc, prompts, max_new, masks, patches):
        cfg = self.config
        lens = np.array([len(p) for p in prompts])
        cont: list[list[int]] = [[] for _ in prompts]
        if max_new <= 0:
            return cont
        width = min(cfg.max_prompt, int(lens.max()) + max_new)
        toks = np.full((len(prompts), width), PAD, dtype=np.int64)
        for i, p in enumerate(prompts):
            toks[i, : len(p)] = p
        active = np.ones(len(prompts), dtype=bool)
        for _ in range(max_new):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            if patches:
                idx = np.arange(len(prompts))
            cur = int(lens[idx].max())
            logits, _ = self.decode(enc[idx], toks[idx, :cur], masks, patches=patches)
            nxt = logits.data[np.arange(idx.size), lens[idx] - 1].argmax(axis=-1)
            for j, i in enumerate(idx):
                if not active[i]:
                    continue
                t = int(nxt[j])
                if t == EOS:
                    active[i] = False
                    continue
                cont[i].append(t)
                if lens[i] >= width:
                    active[i] = False
                    continue
                toks[i, lens[i]] = t
                lens[i] += 1
        return cont


def _apply_hook(name: str, t: Tensor, patches: Mapping[str, PatchValue], trace: dict, capture: Optional[set]) -> Tensor:
    if name in patches:
        p = patches[name]
        new = np.asarray(p(t.data) if callable(p) else p, dtype=np.float64)
        if new.shape != t.shape:
            raise PatchError(f"patch for site {name}: shape {new.shape} does not match activation {t.shape}")
        t = Tensor(new)
    if capture and name in capture:
        trace[name] = t.data
    return t


# ---------------------------------------------------------------- construction


def _param_shapes(cfg: MiniModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.glyph.weight": (v, d),
        "encoder.row.weight": (cfg.grid_rows, d),
        "encoder.col.weight": (cfg.grid_cols, d),
        "embed.tokens.weight": (v, d),
        "embed.positions.weight": (cfg.max_prompt, d),
    }
    if not cfg.tie_unembedding:
        shapes["unembed.weight"] = (d, v)

    def attn(prefix):
        shapes[f"{prefix}.norm.gain"] = (d,)
        shapes[f"{prefix}.norm.bias"] = (d,)
        for n in ("q", "k", "v", "out"):
            shapes[f"{prefix}.{n}_proj.weight"] = (d, d)
            shapes[f"{prefix}.{n}_proj.bias"] = (d,)

    if cfg.encoder_attention:
        attn("encoder.attn")
    for sid in sublayers(cfg.n_layers):
        prefix = _sub_prefix(sid)
        if sid.is_attention:
            attn(prefix)
        else:
            shapes[f"{prefix}.norm.gain"] = (d,)
            shapes[f"{prefix}.norm.bias"] = (d,)
            shapes[f"{prefix}.fc1.weight"] = (d, cfg.d_ff)
            shapes[f"{prefix}.fc1.bias"] = (cfg.d_ff,)
            shapes[f"{prefix}.fc2.weight"] = (cfg.d_ff, d)
            shapes[f"{prefix}.fc2.bias"] = (d,)
    return shapes


EMBED_STD = 0.3
POS_STD = 0.1


def _orthogonal_rows(rng: np.random.Generator, rows: int, cols: int, norm: float) -> np.ndarray:
    """Rows of norm ``norm``; mutually orthogonal when ``rows <= cols``, else a scaled semi-orthogonal frame."""
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    if rows <= cols:
        return q.T * norm
    return q * norm * math.sqrt(rows / cols)


def build_model(config: MiniModelConfig, seed: int = 0) -> MiniModel:
    """Initialise every parameter from ``seed`` in canonical-name order.

    Linear weights are N(0, 1/fan_in), with output projections further scaled
    by 1/sqrt(2 * n_layers); biases are zero and norm gains one. Token and
    encoder embeddings are N(0, 0.3^2) (or scaled orthogonal rows when
    ``embed_init == "orthogonal"``), positional tables N(0, 0.1^2).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    depth_scale = 1.0 / math.sqrt(2 * config.n_layers)
    params: dict[str, Tensor] = {}
    for name, shape in sorted(_param_shapes(config).items()):
        if name.endswith(".norm.gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        elif name == "embed.tokens.weight" and config.embed_init == "orthogonal":
            data = _orthogonal_rows(rng, shape[0], shape[1], EMBED_STD * math.sqrt(shape[1]))
        elif name.startswith(("encoder.glyph", "encoder.row", "encoder.col", "embed.tokens")):
            data = rng.normal(0.0, EMBED_STD, shape)
        elif name == "embed.positions.weight":
            data = rng.normal(0.0, POS_STD, shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith(("out_proj.weight", "fc2.weight")):
                std *= depth_scale
            data = rng.normal(0.0, std, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    arch = {
        sid: SublayerArch(True, tuple(range(config.n_heads)) if sid.is_attention else ())
        for sid in sublayers(config.n_layers)
    }
    return MiniModel(config, params, arch, seed)


# ---------------------------------------------------------------- functional API


def encode(model: MiniModel, grid) -> Tensor:
    return model.encode(grid)


def decode_teacher_forced(model, patch_enc, tokens, masks=None, capture=()):
    return model.decode(patch_enc, tokens, masks, capture)


def decode_with_patch(model, patch_enc, tokens, masks, patches: Mapping[str, PatchValue]) -> Tensor:
    logits, _ = model.decode(patch_enc, tokens, masks, patches=patches)
    return logits


def generate(model, patch_enc, prompts, max_new, masks=None, patches=None):
    return model.generate(patch_enc, prompts, max_new, masks, patches)
