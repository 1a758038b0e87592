import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mintkit import tensor as T
from mintkit.compress import count_params, surgery_heads, surgery_sublayers
from mintkit.model import (
    HeadId,
    MaskSet,
    MiniModelConfig,
    SublayerId,
    build_model,
    decode_teacher_forced,
    decode_with_patch,
    donut_base_config,
    encode,
    generate,
    sublayers,
)
from mintkit.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mintkit.model.config import ConfigError
from mintkit.model.lens import entropy_rows, head_lens, logit_lens
from mintkit.model.network import PatchError
from mintkit.synthdocs.vocab import ANSWER, EOS, QSTART

from conftest import SMALL

S = SublayerId.parse


def _logits(model, batch, masks=None, **kw):
    with T.no_grad():
        logits, trace = model.decode(model.encode(batch.grids), batch.inputs, masks, **kw)
    return logits.data, trace


# ---------------------------------------------------------------- ids and config


def test_names_render_like_the_layer_diagram():
    assert [str(s) for s in sublayers(4)][:6] == ["S0", "C0", "M0", "S1", "C1", "M1"]
    assert str(HeadId(S("C3"), 11)) == "C3.H11"
    assert HeadId.parse("C3.H11") == HeadId(S("C3"), 11)
    with pytest.raises(ValueError):
        HeadId(S("M1"), 0)


def test_maskset_dropped_sublayer_drops_heads_and_roundtrips():
    m = MaskSet.drop(["C1"], ["S0.H2"])
    assert not m.keeps_head(HeadId(S("C1"), 0))
    assert not m.keeps_head(HeadId(S("S0"), 2)) and m.keeps_head(HeadId(S("S0"), 1))
    assert MaskSet.from_dict(m.to_dict()) == m
    assert MaskSet.identity().is_identity


def test_config_validation():
    with pytest.raises(ConfigError):
        MiniModelConfig(d_model=30, n_heads=8).validate()
    with pytest.raises(ConfigError):
        MiniModelConfig(vocab_size=10).validate()
    with pytest.raises(ConfigError):
        build_model(MiniModelConfig(encoder_window="diag"), 0)


# ---------------------------------------------------------------- build


def test_build_is_deterministic():
    a, b = build_model(SMALL, 4), build_model(SMALL, 4)
    assert sorted(a.params) == sorted(b.params)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = build_model(SMALL, 5)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_toy_decoder_count_matches_enumeration():
    cfg = MiniModelConfig()
    model = build_model(cfg, 0)
    d, f = cfg.d_model, cfg.d_ff
    attn = 4 * d * d + 4 * d + 2 * d
    ff = 2 * d * f + d + f + 2 * d
    assert model.num_parameters("decoder.") == 4 * (2 * attn + ff) == count_params(cfg).decoder_params == 267_008
    table = count_params(cfg)
    enumerated = sum(t.size for n, t in model.named_parameters() if not n.startswith("decoder."))
    assert table.total_params - table.row("unembedding").params - table.decoder_params == enumerated


def test_tied_unembedding_shares_storage(small_model):
    u = small_model.unembedding_matrix()
    assert np.shares_memory(u, small_model.embedding.data)
    assert "unembed.weight" not in small_model.params


# ---------------------------------------------------------------- encoder


def test_encoder_locality_and_blank_rows():
    model = build_model(SMALL, 1)
    rng = np.random.default_rng(0)
    g = rng.integers(5, 60, (SMALL.grid_rows, SMALL.grid_cols))
    g2 = g.copy()
    g2[2, 3] += 1
    e1, e2 = encode(model, g).data, encode(model, g2).data
    changed = np.flatnonzero(np.any(e1 != e2, axis=1))
    assert changed.tolist() == [2 * SMALL.grid_cols + 3]
    blank = np.full_like(g, 0)
    eb = encode(model, blank).data
    p = model.params
    rows = np.repeat(np.arange(SMALL.grid_rows), SMALL.grid_cols)
    cols = np.tile(np.arange(SMALL.grid_cols), SMALL.grid_rows)
    ref = p["encoder.glyph.weight"].data[0] + p["encoder.row.weight"].data[rows] + p["encoder.col.weight"].data[cols]
    assert np.array_equal(eb, ref)
    assert encode(model, g).data.tobytes() == e1.tobytes()
    with pytest.raises(ValueError):
        encode(model, g[:-1])


def test_row_window_encoder_attention_stays_in_its_row():
    cfg = MiniModelConfig(**{**SMALL.to_dict(), "encoder_attention": True, "encoder_window": "row"})
    model = build_model(cfg, 2)
    g = np.random.default_rng(1).integers(5, 60, (cfg.grid_rows, cfg.grid_cols))
    g2 = g.copy()
    g2[4, 0] += 2
    diff = np.any(encode(model, g).data != encode(model, g2).data, axis=1).reshape(cfg.grid_rows, cfg.grid_cols)
    assert diff[4].all() and not np.delete(diff, 4, axis=0).any()


# ---------------------------------------------------------------- decoder


def test_identity_masks_bit_exact(small_model, small_batch):
    a, _ = _logits(small_model, small_batch)
    b, _ = _logits(small_model, small_batch, MaskSet.identity())
    c, _ = _logits(small_model, small_batch, MaskSet.drop())
    assert a.tobytes() == b.tobytes() == c.tobytes()
    via_api, _ = decode_teacher_forced(small_model, encode(small_model, small_batch.grids), small_batch.inputs)
    assert np.array_equal(via_api.data, a)


@pytest.mark.parametrize("seed", range(4))
def test_head_drop_equals_zero_ablation(small_model, small_batch, seed):
    rng = np.random.default_rng(seed)
    heads = small_model.all_heads()
    h = heads[int(rng.integers(len(heads)))]
    dropped, _ = _logits(small_model, small_batch, MaskSet.drop(heads=[h]))
    dh = SMALL.d_head

    def zero_head(av):
        av = av.copy()
        av[:, h.head] = 0.0
        return av

    ablated, _ = _logits(small_model, small_batch, patches={f"{h.sublayer}.av": zero_head})
    assert np.max(np.abs(dropped - ablated)) <= 1e-10
    assert dh * SMALL.n_heads == SMALL.d_model


def test_all_heads_dropped_equals_sublayer_dropped_modulo_bias(small_batch):
    model = build_model(SMALL, 8)
    sid = S("C1")
    model.params["decoder.L1.C.out_proj.bias"].data[:] = 0.0
    heads = model.heads_of(sid)
    a, _ = _logits(model, small_batch, MaskSet.drop(heads=heads))
    b, _ = _logits(model, small_batch, MaskSet.drop([sid]))
    assert np.max(np.abs(a - b)) <= 1e-10


def test_attention_rows_sum_to_one(small_model, small_batch):
    sites = ["C1.attn", "S0.attn", "C1.query", "C1.av", "M1.hidden", "C1.output", "C1.input"]
    _, trace = _logits(small_model, small_batch, capture=sites)
    assert set(sites) <= set(trace.activations)
    for s in ("C1.attn", "S0.attn"):
        assert np.max(np.abs(trace[s].sum(-1) - 1.0)) <= 1e-12
    with pytest.raises(ValueError):
        _logits(small_model, small_batch, capture=["C1.nothing"])


def test_residual_additivity_and_skip(small_model, small_batch):
    _, tr = _logits(small_model, small_batch, capture=["M0.input", "M0.output", "M0.resid_post"])
    assert np.array_equal(tr["M0.resid_post"], tr["M0.input"] + tr["M0.output"])
    _, tr = _logits(small_model, small_batch, MaskSet.drop(["M0"]), capture=["M0.input", "M0.resid_post", "M0.output"])
    assert np.array_equal(tr["M0.resid_post"], tr["M0.input"]) and not tr["M0.output"].any()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 9), st.integers(0, 1000))
def test_causality(pos, seed):
    model = build_model(SMALL, 0)
    rng = np.random.default_rng(seed)
    enc = rng.standard_normal((1, SMALL.n_patches, SMALL.d_model))
    tok = rng.integers(1, 60, (1, 10))
    tok2 = tok.copy()
    tok2[0, pos:] = rng.integers(1, 60, 10 - pos)
    with T.no_grad():
        a = model.decode(enc, tok)[0].data
        b = model.decode(enc, tok2)[0].data
    assert np.array_equal(a[0, :pos], b[0, :pos])


def test_self_patch_is_bit_exact(small_model, small_batch):
    sites = ["C1.output", "S1.query", "M0.hidden", "embed", "C0.av"]
    clean, trace = _logits(small_model, small_batch, capture=sites)
    enc = encode(small_model, small_batch.grids)
    with T.no_grad():
        patched = decode_with_patch(small_model, enc, small_batch.inputs, None, {s: trace[s] for s in sites}).data
    assert patched.tobytes() == clean.tobytes()


def test_zero_patch_of_output_equals_skip_with_zero_bias(small_batch):
    model = build_model(SMALL, 11)
    model.params["decoder.L1.C.out_proj.bias"].data[:] = 0.0
    _, tr = _logits(model, small_batch, capture=["C1.output"])
    patched, _ = _logits(model, small_batch, patches={"C1.output": np.zeros_like(tr["C1.output"])})
    skipped, _ = _logits(model, small_batch, MaskSet.drop(["C1"]))
    assert np.max(np.abs(patched - skipped)) <= 1e-10


def test_patch_shape_mismatch_names_site(small_model, small_batch):
    with pytest.raises(PatchError, match="C1.output"):
        _logits(small_model, small_batch, patches={"C1.output": np.zeros((1, 2, 3))})


def test_sequence_longer_than_max_prompt(small_model):
    enc = np.zeros((1, SMALL.n_patches, SMALL.d_model))
    with pytest.raises(T.ContractError):
        small_model.decode(enc, np.ones((1, SMALL.max_prompt + 1), dtype=int))


# ---------------------------------------------------------------- generation


def test_generate_max_new_zero_and_constant_favourite():
    model = build_model(SMALL, 0)
    enc = np.zeros((2, SMALL.n_patches, SMALL.d_model))
    prompts = [[QSTART, 20, ANSWER], [QSTART, ANSWER]]
    assert generate(model, enc, prompts, 0) == [[], []]
    # zero decoder, constant residual: logits are embedding @ ones, so only row 9 scores
    fav = build_model(SMALL, 0)
    for name, p in fav.params.items():
        if name.startswith("decoder."):
            p.data[:] = 0.0
    fav.params["embed.tokens.weight"].data[:] = 0.0
    fav.params["embed.positions.weight"].data[:] = 1.0
    fav.params["embed.tokens.weight"].data[9] = 1.0
    out = generate(fav, enc, prompts, 5)
    assert out == [[9] * 5, [9] * 5]
    assert EOS != 9


def test_generation_is_deterministic(small_model, small_data):
    from mintkit.synthdocs.generate import encode_prompt

    prompts = [encode_prompt(ex.qa).prompt for ex in small_data[:5]]
    enc = encode(small_model, np.stack([ex.doc.grid for ex in small_data[:5]]))
    assert generate(small_model, enc, prompts, 6) == generate(small_model, enc, prompts, 6)


# ---------------------------------------------------------------- surgery equivalence


def test_surgery_sublayer_count_and_equivalence(small_model, small_batch):
    keep = [s for s in small_model.all_sublayers() if str(s) != "M0"]
    cut = surgery_sublayers(small_model, keep)
    d, f = SMALL.d_model, SMALL.d_ff
    assert small_model.num_parameters() - cut.num_parameters() == 2 * d * f + d + f + 2 * d
    ref, _ = _logits(small_model, small_batch, MaskSet.drop(["M0"]))
    got, _ = _logits(cut, small_batch)
    assert np.max(np.abs(ref - got)) <= 1e-10


def test_surgery_heads_scales_projections():
    model = build_model(MiniModelConfig(), 0)
    sid = S("S2")
    keep = [h for h in model.all_heads() if h.sublayer != sid or h.head in (1, 6)]
    cut = surgery_heads(model, keep)
    for n in ("q", "k", "v"):
        assert cut.params[f"decoder.L2.S.{n}_proj.weight"].size * 4 == model.params[f"decoder.L2.S.{n}_proj.weight"].size
    assert cut.params["decoder.L2.S.out_proj.weight"].shape == (16, 64)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip(tmp_path, small_model, small_batch):
    masks = MaskSet.drop(["M1"], ["S0.H1"])
    mask_arrays = {"decoder.L0.M.fc1.weight": np.ones((SMALL.d_model, SMALL.d_ff), dtype=bool)}
    p = save_checkpoint(tmp_path / "m.ckpt", small_model, masks, {"note": 1}, mask_arrays)
    model, m2, extra, wm = load_checkpoint(p)
    assert m2 == masks and extra == {"note": 1} and np.array_equal(wm["decoder.L0.M.fc1.weight"], mask_arrays["decoder.L0.M.fc1.weight"])
    a, _ = _logits(small_model, small_batch, masks)
    b, _ = _logits(model, small_batch, masks)
    assert a.tobytes() == b.tobytes()
    again = save_checkpoint(tmp_path / "m2.ckpt", small_model, masks, {"note": 1}, mask_arrays)
    assert p.read_bytes() == again.read_bytes()


def test_checkpoint_keeps_surgery_and_rejects_garbage(tmp_path, small_model):
    cut = surgery_sublayers(small_model, [s for s in small_model.all_sublayers() if str(s) != "S1"])
    model, *_ = load_checkpoint(save_checkpoint(tmp_path / "cut.ckpt", cut))
    assert not model.arch[S("S1")].present and model.num_parameters() == cut.num_parameters()
    (tmp_path / "bad.ckpt").write_text("nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


# ---------------------------------------------------------------- lens


def test_logit_lens_examples():
    cfg = MiniModelConfig(**{**SMALL.to_dict(), "d_model": 128, "n_heads": 4, "embed_init": "orthogonal"})
    model = build_model(cfg, 0)
    emb = model.embedding.data
    p = logit_lens(model, emb[:40])
    assert np.array_equal(p.argmax(-1), np.arange(40))
    assert np.allclose(logit_lens(model, np.zeros((3, 128))), 1.0 / cfg.vocab_size, atol=1e-15)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        logit_lens(model, np.zeros((2, 5)))


def test_head_lens_zero_value_is_uniform_and_rejects_self_attention():
    model = build_model(SMALL, 0)
    enc = encode(model, np.zeros((SMALL.grid_rows, SMALL.grid_cols), dtype=int))
    model.params["decoder.L1.C.v_proj.weight"].data[:] = 0.0
    model.params["decoder.L1.C.v_proj.bias"].data[:] = 0.0
    dist = head_lens(model, HeadId(S("C1"), 2), enc)
    assert dist.shape == (SMALL.n_patches, SMALL.vocab_size)
    assert np.allclose(dist, 1.0 / SMALL.vocab_size, atol=1e-15)
    assert np.allclose(entropy_rows(dist), math.log(SMALL.vocab_size))
    with pytest.raises(ValueError):
        head_lens(model, HeadId(S("S1"), 0), enc)


def test_donut_base_config_dimensions():
    cfg = donut_base_config()
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.vocab_size) == (1024, 4, 16, 4096, 57525)
