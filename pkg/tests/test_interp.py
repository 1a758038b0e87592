import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, SMALL_SPEC
from mintkit.model import MiniModelConfig, build_model
from mintkit.model.ids import HeadId, MaskSet
from mintkit.model.network import PatchError
from mintkit.synthdocs.generate import gen_dataset
from mintkit.tensor.autograd import ContractError, ParameterError
from mintkit.interp.heads import HeadStats, head_statistics, importance_order, rank_heads, row_statistics, transcription_probe
from mintkit.interp.patching import PatchSpec, activation_patch_experiment, mean_activation, overwrite
from mintkit.interp.pathways import cosine_agreement, minimal_effective, pathway_route, pathway_search
from mintkit.interp.perplexity import perplexity_teacher_forced, teacher_forced_exact, token_nll
from mintkit.interp.retrieval import LABELS, REJECTED, HypothesisTally, candidates, label_output, retrieval_tally
from mintkit.interp.sweeps import (
    SweepResult,
    final_ff_experiment,
    reproject,
    reprojection_boundaries,
    skip_sweep,
    token_reprojection_sweep,
)

ORTHO = MiniModelConfig(**{**SMALL.to_dict(), "d_model": 128, "embed_init": "orthogonal"})


def _zero_final(x):
    return np.zeros_like(x)


# ---------------------------------------------------------------- perplexity


def test_uniform_logits_give_vocab_perplexity(small_model, small_batch):
    ppl = perplexity_teacher_forced(small_model, small_batch, patches={"final": _zero_final})
    assert ppl == pytest.approx(128.0, rel=1e-12)


def test_self_patch_perplexity_is_identical(small_model, small_batch):
    from mintkit.interp.patching import capture

    sites = ["C1.output", "M0.hidden"]
    acts = capture(small_model, small_batch, sites)
    a = perplexity_teacher_forced(small_model, small_batch)
    b = perplexity_teacher_forced(small_model, small_batch, patches=acts)
    assert a == b and a >= 1.0


def test_perplexity_errors_and_chunking(small_model, small_data):
    with pytest.raises(ParameterError):
        perplexity_teacher_forced(small_model, [])
    whole = token_nll(small_model, small_data[:10])
    chunked = token_nll(small_model, small_data[:10], chunk=3)
    assert np.allclose(whole.nll, chunked.nll, rtol=0, atol=1e-12)
    assert teacher_forced_exact(small_model, small_data[:10]).dtype == bool


# ---------------------------------------------------------------- sweeps


def test_zero_sublayer_has_zero_delta(small_batch):
    model = build_model(SMALL, 4)
    for name, p in model.named_parameters():
        if name.startswith("decoder.L0.M."):
            p.data[:] = 0.0
    res = skip_sweep(model, small_batch)
    assert res.deltas["M0"] == 0.0
    assert len(res.deltas) == 6 and res.n_samples == len(small_batch)


def test_sweep_is_deterministic_and_recomputable(small_model, small_batch):
    a = skip_sweep(small_model, small_batch)
    b = skip_sweep(small_model, small_batch)
    assert a.to_dict() == b.to_dict()
    base = perplexity_teacher_forced(small_model, small_batch)
    assert a.baseline == base
    for unit, m in a.masks.items():
        assert a.deltas[unit] == perplexity_teacher_forced(small_model, small_batch, MaskSet.from_dict(m)) - base
    back = SweepResult.from_dict(a.to_dict())
    assert back.ranked() == a.ranked() and back.most_critical() == a.ranked()[0][0]


def test_head_sweep_covers_every_head(small_model, small_batch):
    res = skip_sweep(small_model, small_batch, heads=True)
    assert list(res.deltas) == [str(h) for h in small_model.all_heads()]
    assert res.kind == "head_skip"


def test_reprojection_round_trip_at_embedding(small_batch):
    model = build_model(ORTHO, 0)
    res = token_reprojection_sweep(model, small_batch)
    assert reprojection_boundaries(model)[0] == "S0.input"
    assert res.sweep.deltas["S0.input"] == 0.0
    assert res.earliest_below == "S0.input" and res.absorbable("S0.input")
    assert list(res.sweep.deltas)[-1] == "final"


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_reprojection_is_idempotent(seed):
    model = build_model(ORTHO, 0)
    x = np.random.default_rng(seed).standard_normal((2, 5, 128))
    once = reproject(model, x)
    assert np.array_equal(reproject(model, once), once)


def test_reprojection_needs_tied_weights(small_batch):
    model = build_model(MiniModelConfig(**{**SMALL.to_dict(), "tie_unembedding": False}), 0)
    with pytest.raises(ContractError):
        token_reprojection_sweep(model, small_batch)


def test_final_ff_experiment_table(small_model, small_batch):
    tab = final_ff_experiment(small_model, small_batch)
    assert set(tab.curves) == {"clean", "skip M1", "patch M1 with C1.av"}
    for curve in tab.curves.values():
        assert all(0.0 <= v <= 1.0 for v in curve)
        assert curve == sorted(curve)
    skipped = token_nll(small_model, small_batch, MaskSet.drop(["M1"])).per_example_perplexity()
    assert np.array_equal(np.array(tab.per_sample["skip M1"]), skipped)
    assert tab.distance_to_clean("clean") == 0.0


# ---------------------------------------------------------------- patching


def test_three_runs_coincide_when_inputs_match(small_model, small_data):
    ex = small_data[:4]
    out = activation_patch_experiment(small_model, ex, ex, PatchSpec("S1.output"), max_new=4)
    assert out.clean == out.corrupt == out.patched


def test_zero_patch_equals_skip_with_zero_bias(small_data):
    model = build_model(SMALL, 8)
    model.params["decoder.L1.C.out_proj.bias"].data[:] = 0.0
    ex = small_data[:5]
    out = activation_patch_experiment(model, ex, ex, PatchSpec("C1.output", source="zero"), max_new=4)
    assert out.patched.perplexity == perplexity_teacher_forced(model, ex, MaskSet.drop(["C1"]))


def test_mean_and_tensor_sources(small_model, small_data):
    ref = small_data[:8]
    mean = mean_activation(small_model, ref, "S0.output")
    assert mean.shape == (1, 1, SMALL.d_model)
    spec = PatchSpec("S0.output", source="tensor", value=mean)
    a = activation_patch_experiment(small_model, small_data[:3], small_data[:3], spec, max_new=2)
    b = activation_patch_experiment(small_model, small_data[:3], small_data[:3], PatchSpec("S0.output", source="mean"), reference=ref, max_new=2)
    assert a.patched == b.patched
    with pytest.raises(PatchError):
        mean_activation(small_model, ref, "S0.attn")


def test_patch_spec_errors(small_model, small_data):
    with pytest.raises(PatchError):
        PatchSpec("S0.output", source="noise")
    with pytest.raises(PatchError):
        PatchSpec("S0.output", source="tensor")
    with pytest.raises(PatchError):
        PatchSpec("S0.output", direction="sideways")
    with pytest.raises(PatchError):
        activation_patch_experiment(small_model, small_data[:2], small_data[:3], PatchSpec("S0.output"))
    fn = overwrite("S0.output", np.zeros((2, 3)))
    with pytest.raises(PatchError):
        fn(np.zeros((2, 3, 4)))


def test_positions_filter_touches_only_listed_positions():
    fn = overwrite("M0.output", np.ones((1, 1, 3)), positions=[1, 9])
    out = fn(np.zeros((2, 4, 3)))
    assert out[:, 1].sum() == 6.0 and out.sum() == 6.0


# ---------------------------------------------------------------- head statistics


@pytest.mark.parametrize("n", [1, 2, 7, 48])
def test_uniform_row_statistics(n):
    attn = np.full((1, 1, 3, n), 1.0 / n)
    ent, var, _ = row_statistics(attn, np.ones((1, 3), dtype=bool))
    assert ent[0] / 3 == pytest.approx(math.log(n), abs=1e-12)
    assert abs(var[0]) < 1e-15


@pytest.mark.parametrize("n", [2, 5, 48])
def test_one_hot_row_statistics(n):
    attn = np.zeros((1, 1, 1, n))
    attn[..., n // 2] = 1.0
    ent, var, _ = row_statistics(attn, np.ones((1, 1), dtype=bool))
    assert ent[0] == 0.0
    assert var[0] == pytest.approx((n - 1) / n**2, rel=1e-12)
    assert var[0] == pytest.approx(np.var(attn[0, 0, 0]), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_one_hot_extremes(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    rows = np.zeros((1, 1, 2, n))
    rows[0, 0, 0] = p
    rows[0, 0, 1, 0] = 1.0
    valid = np.ones((1, 1), dtype=bool)
    e_p, v_p, _ = row_statistics(rows[:, :, :1], valid)
    e_h, v_h, _ = row_statistics(rows[:, :, 1:], valid)
    assert e_h[0] <= e_p[0] + 1e-12 and v_h[0] >= v_p[0] - 1e-12


def test_causal_variance_uses_row_support():
    attn = np.zeros((1, 1, 3, 3))
    for t in range(3):
        attn[0, 0, t, : t + 1] = 1.0 / (t + 1)
    _, var, _ = row_statistics(attn, np.ones((1, 3), dtype=bool), causal=True)
    assert abs(var[0]) < 1e-15


def test_head_statistics_ranges_and_order_invariance(small_model, small_data):
    a = head_statistics(small_model, small_data[:12])
    b = head_statistics(small_model, small_data[:12][::-1])
    assert set(a.entropy) == set(small_model.all_heads())
    for h in a.entropy:
        assert a.entropy[h] == pytest.approx(b.entropy[h], abs=1e-12)
        assert a.variance[h] == pytest.approx(b.variance[h], abs=1e-12)
        assert 0.0 <= a.entropy[h] <= math.log(SMALL.n_patches) + 1e-9
        assert a.variance[h] >= -1e-15
    back = HeadStats.from_dict(a.to_dict())
    assert back.entropy == a.entropy and back.n_samples == 12


def _stats(ent: dict, var: dict) -> HeadStats:
    hs = {HeadId.parse(k): v for k, v in {**ent, **var}.items()}
    e = {h: (ent.get(str(h), 0.0)) for h in hs}
    v = {h: (var.get(str(h), 0.0)) for h in hs}
    return HeadStats(e, v, {h: 0.0 for h in hs})


def test_rank_heads_orders_and_ties():
    st_ = _stats({"S0.H0": 2.0, "S0.H1": 0.1, "S1.H0": 0.1}, {"C0.H0": 0.5, "C0.H1": 0.5, "C1.H0": 0.9})
    r = rank_heads(st_)
    assert [str(h) for h in r["S"]] == ["S0.H1", "S1.H0", "S0.H0"]
    assert [str(h) for h in r["C"]] == ["C1.H0", "C0.H0", "C0.H1"]
    least = importance_order(st_)
    assert str(least[0]) in ("S0.H0", "C0.H1") and len(least) == 6
    assert importance_order(st_) == least


def test_transcription_probe_runs(small_model, small_data):
    stats = head_statistics(small_model, small_data[:8])
    res = transcription_probe(small_model, stats, small_data[:8], random_draws=3)
    assert res.layer == 1 and len(res.heads_subset) == 2
    for v in (res.agreement_full, res.agreement_subset, res.agreement_random):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- pathways


def test_pathway_route_and_extremes(small_model, small_data):
    big = build_model(MiniModelConfig(**{**SMALL.to_dict(), "n_layers": 4}), 0)
    assert [str(s) for s in pathway_route(big)] == ["S1", "M1", "S2", "M2", "S3"]
    kw = [ex for ex in small_data if ex.task == "keyword"][:4]
    ranked = pathway_search(small_model, kw)
    assert len(ranked) == 2 ** len(pathway_route(small_model))
    full = next(p for p in ranked if len(p.transform) == len(pathway_route(small_model)))
    assert full.agreement == pytest.approx(1.0, abs=1e-12)
    empty = next(p for p in ranked if not p.transform)
    assert -1.0 <= empty.agreement <= 1.0
    assert minimal_effective(ranked, 1.5) is None
    best = minimal_effective(ranked)
    assert best is not None and best.agreement >= 0.95


def test_cosine_agreement_handles_zero_vectors():
    a = np.ones((2, 3, 4))
    assert cosine_agreement(a, a) == pytest.approx(1.0)
    assert cosine_agreement(a, -a) == pytest.approx(-1.0)
    assert cosine_agreement(a, np.zeros_like(a)) == 0.0


# ---------------------------------------------------------------- retrieval


def _kv_doc():
    spec = SMALL_SPEC.__class__(**{**SMALL_SPEC.__dict__, "n_docs": 4, "mix": (("keyvalue", 1.0),), "pairs_min": 3, "pairs_max": 3})
    return gen_dataset(spec, 1)[0]


def test_identical_docs_are_rejected():
    ex = _kv_doc()
    key = ex.doc.fields[0].key
    cands = candidates(ex.doc, ex.doc, key)
    assert cands["positional"] == cands["semantic"]
    assert label_output(ex.doc.fields[0].value, cands) == REJECTED


def test_labels_follow_precedence():
    c = {"positional": "v1", "semantic": "v2", "memorized": "v3"}
    assert [label_output(o, c) for o in ("v1", "v2", "v3", "zz", "")] == ["positional", "semantic", "memorized", "failure", "failure"]


def test_tally_sums_to_hundred(small_model, small_data):
    pool = [ex for ex in small_data if ex.task in ("keyvalue", "casing")]
    tally = retrieval_tally(small_model, pool, n_cases=12, seed=0, batch=8)
    pct = tally.percentages()
    assert tally.total == 12 and set(pct) == set(LABELS)
    assert sum(pct.values()) == pytest.approx(100.0)
    d = tally.to_dict()
    assert d["total"] == sum(d["counts"].values())
    accepted = [c for c in tally.cases if c["label"] != REJECTED]
    assert len(accepted) == 12
    assert retrieval_tally(small_model, pool, n_cases=12, seed=0, batch=8).to_dict() == d


def test_empty_tally_is_well_formed():
    t = HypothesisTally()
    assert t.total == 0 and sum(t.percentages().values()) == 0.0
    t.add(REJECTED)
    assert t.rejected == 1 and t.total == 0
