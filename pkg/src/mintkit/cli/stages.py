"""Pipeline stages over one experiment directory.

Each stage builds its outputs in ``<root>/<stage>.partial`` and renames the
directory to ``<root>/<stage>`` once everything is written, so a stage
directory exists only when the stage completed. A failed stage leaves its
partial directory behind for inspection; the next run clears it.
"""

from __future__ import annotations

import json
import os
import shutil
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..compress import (
    MintBudgets,
    PruneRecipe,
    StudentBudget,
    apply_masks,
    apply_weight_masks,
    convention_report,
    enumerate_students,
    flop_fraction,
    magnitude_activation_prune,
    mint_recipe,
    param_report,
    random_head_masks,
    random_sublayer_masks,
    recipe_from_masks,
    sparsity_for_fraction,
    structured_baseline,
    unmasked_decoder_params,
)
from ..distill import KDConfig, TeacherConfig, parameter_digest, train_distill, train_teacher
from ..evalmetrics import EvalReport, compare, evaluate, flop_shape, render_table, to_csv
from ..interp import (
    HeadStats,
    ReprojectionResult,
    SweepResult,
    final_ff_experiment,
    head_statistics,
    importance_order,
    minimal_effective,
    pathway_search,
    rank_heads,
    retrieval_tally,
    skip_sweep,
    teacher_forced_exact,
    token_nll,
    token_reprojection_sweep,
    transcription_probe,
)
from ..model import HeadId, MaskSet, MiniModel, build_model, donut_base_config
from ..model.checkpoint import load_checkpoint, save_checkpoint
from ..model.network import _sub_prefix
from ..synthdocs.dataset_io import load_dataset, load_manifest, save_dataset, save_manifest
from ..synthdocs.generate import DatasetSpec, Example, gen_dataset
from ..synthdocs.split import SPLIT_NAMES, SplitSpec, split
from .config import canonical, config_hash, model_config
from .records import find, record, write_records, write_text

STAGES = ("data", "teacher", "analyze", "prune", "distill", "eval", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class InvariantViolation(RuntimeError):
    pass


class UsageError(ValueError):
    pass


def verbosity() -> int:
    try:
        return int(os.environ.get("MINTKIT_VERBOSE", "1"))
    except ValueError:
        return 1


def say(msg: str, level: int = 1) -> None:
    if verbosity() >= level:
        print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- experiment directory


@dataclass
class Experiment:
    root: Path
    cfg: dict

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def done(self, stage: str) -> bool:
        return self.dir(stage).is_dir()

    def rec(self, kind: str, /, **payload) -> dict:
        return record(kind, self.hash, **payload)

    # lazily loaded artifacts
    def data(self) -> dict[str, list[Example]]:
        return load_data_dir(self.dir("data"))

    def teacher(self) -> MiniModel:
        return load_checkpoint(self.dir("teacher") / "teacher.ckpt")[0]

    def recipes(self) -> list[dict]:
        return find(self.dir("prune") / "recipes.jsonl", "recipe")


def open_experiment(root, cfg: dict) -> Experiment:
    """Create ``root`` (or reuse it) and pin its config snapshot."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    snap = root / "config.json"
    text = json.dumps({"config_hash": config_hash(cfg), "config": json.loads(canonical(cfg))}, sort_keys=True, indent=1) + "\n"
    if snap.exists():
        if snap.read_text(encoding="utf-8") != text:
            raise UsageError(f"{root} was created with a different config (see {snap})")
    else:
        write_text(snap, text)
    return Experiment(root, cfg)


class Lock:
    def __init__(self, root: Path):
        self.path = Path(root) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path} exists: another command holds this experiment (remove it if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_stage(exp: Experiment, name: str, fn: Callable[[Experiment, Path], None]) -> None:
    final, partial = exp.dir(name), exp.root / f"{name}.partial"
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir()
    say(f"[{name}] running")
    t0 = time.monotonic()
    try:
        fn(exp, partial)
    except (InvariantViolation, UsageError):
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc} (partial state kept in {partial})") from exc
    if final.exists():
        shutil.rmtree(final)
    os.replace(partial, final)
    # wall time goes to stderr only, so stage outputs stay byte-reproducible
    say(f"[{name}] done in {time.monotonic() - t0:.1f}s")


def run_pipeline(exp: Experiment, stop_after: Optional[str] = None, only: Optional[str] = None) -> list[str]:
    """Run missing stages in order; once one runs, every later stage runs too. Returns the stages executed."""
    if stop_after is not None and stop_after not in STAGES:
        raise UsageError(f"unknown stage {stop_after!r}; choose from {STAGES}")
    executed: list[str] = []
    with Lock(exp.root):
        for name in STAGES:
            if only is not None and name != only:
                if not exp.done(name) and STAGES.index(name) < STAGES.index(only):
                    raise StageError(only, f"upstream stage {name!r} has not been run")
                continue
            if executed or not exp.done(name) or only == name:
                run_stage(exp, name, STAGE_FUNCS[name])
                executed.append(name)
            if name == stop_after:
                break
    return executed


# ---------------------------------------------------------------- data


def dataset_specs(cfg: dict) -> tuple[DatasetSpec, DatasetSpec, SplitSpec, int]:
    d, mcfg = cfg["data"], model_config(cfg)
    known = {f.name for f in fields(DatasetSpec)}
    kw = {k: v for k, v in d.items() if k in known and k not in ("n_docs", "id_prefix")}
    if "mix" in kw:
        kw["mix"] = tuple((str(k), float(v)) for k, v in dict(kw["mix"]).items())
    kw.update(grid_rows=mcfg.grid_rows, grid_cols=mcfg.grid_cols, vocab_size=mcfg.vocab_size)
    train = DatasetSpec(n_docs=int(d["train_docs"]), id_prefix="t", **kw)
    held = DatasetSpec(n_docs=int(d["heldout_docs"]), id_prefix="h", **kw)
    return train, held, SplitSpec(**d["split"]), int(d["seed"])


def write_data_dir(cfg: dict, out: Path) -> dict[str, int]:
    train_spec, held_spec, split_spec, seed = dataset_specs(cfg)
    train = gen_dataset(train_spec, 2 * seed)
    held = gen_dataset(held_spec, 2 * seed + 1)
    parts = split(held, split_spec, seed)
    save_dataset(out / "train.jsonl", train)
    save_dataset(out / "heldout.jsonl", held)
    save_manifest(out / "train.txt", train)
    for name in SPLIT_NAMES:
        save_manifest(out / f"{name}.txt", parts[name])
    counts = {"train": len(train), **{k: len(v) for k, v in parts.items()}}
    tasks = {k: {t: sum(1 for e in v if e.task == t) for t in sorted({e.task for e in v})} for k, v in {"train": train, **parts}.items()}
    write_records(out / "data.jsonl", [record("dataset", config_hash(cfg), counts=counts, tasks=tasks, seed=seed)])
    return counts


def load_data_dir(path: Path) -> dict[str, list[Example]]:
    path = Path(path)
    missing = [n for n in ("train.jsonl", "heldout.jsonl", "train.txt") + tuple(f"{s}.txt" for s in SPLIT_NAMES) if not (path / n).exists()]
    if missing:
        raise UsageError(f"dataset directory {path} lacks {missing}")
    train = load_dataset(path / "train.jsonl")
    held = load_dataset(path / "heldout.jsonl")
    out = {"train": load_manifest(path / "train.txt", train)}
    for name in SPLIT_NAMES:
        out[name] = load_manifest(path / f"{name}.txt", held)
    return out


def stage_data(exp: Experiment, out: Path) -> None:
    write_data_dir(exp.cfg, out)


# ---------------------------------------------------------------- teacher


def _capped(xs: list, n: int) -> list:
    return xs[: int(n)] if n else xs


def _selection_evaluator(exp: Experiment, sel: list[Example]) -> Callable[[MiniModel], dict]:
    def fn(m: MiniModel) -> dict:
        r = evaluate(m, sel, split="selection", max_new=exp.cfg["eval"]["max_new"])
        return {"exact_match": r.exact_match, "anls": r.anls}

    return fn


def stage_teacher(exp: Experiment, out: Path) -> None:
    data = exp.data()
    sel = _capped(data["selection"], exp.cfg["analysis"]["max_samples"])
    tcfg = TeacherConfig(seed=exp.seed, **exp.cfg["teacher"])
    model = build_model(model_config(exp.cfg), exp.seed)
    every = max(1, tcfg.steps // 20)

    def progress(rec):
        if (rec.step + 1) % every == 0:
            say(f"[teacher] step {rec.step + 1}/{tcfg.steps} loss {rec.ce:.4f}", 2)

    model, log = train_teacher(model, data["train"], tcfg, _selection_evaluator(exp, sel), progress)
    rep = evaluate(model, data["evaluation"], split="evaluation", model_id=f"teacher-s{exp.seed}", recipe_id="teacher",
                   seeds=[exp.seed], max_new=exp.cfg["eval"]["max_new"])
    save_checkpoint(out / "teacher.ckpt", model, extra={"evaluation": rep.to_dict()})
    recs = [exp.rec("train_step", **s.__dict__) for s in log.steps]
    recs += [exp.rec("train_eval", split="selection", **e) for e in log.evals]
    recs.append(exp.rec("teacher_eval", steps=tcfg.steps, **rep.to_dict()))
    write_records(out / "train_log.jsonl", recs)


# ---------------------------------------------------------------- analysis


def stage_analyze(exp: Experiment, out: Path) -> None:
    data, teacher = exp.data(), exp.teacher()
    a = exp.cfg["analysis"]
    interp = _capped(data["interp"], a["max_samples"])
    recs = []
    sweep = skip_sweep(teacher, interp, "interp")
    recs.append(exp.rec("skip_sweep", most_critical=sweep.most_critical(), **sweep.to_dict()))
    hsweep = skip_sweep(teacher, interp, "interp", heads=True)
    recs.append(exp.rec("head_skip_sweep", **{k: v for k, v in hsweep.to_dict().items() if k != "masks"}))
    rep = token_reprojection_sweep(teacher, interp, "interp", tol=a["reprojection_tol"])
    recs.append(exp.rec("reprojection", **{k: v for k, v in rep.to_dict().items() if k != "masks"}))
    stats = head_statistics(teacher, interp)
    ranks = rank_heads(stats)
    recs.append(exp.rec("head_stats", ranks={k: [str(h) for h in v] for k, v in ranks.items()},
                        importance_order=[str(h) for h in importance_order(stats)], **stats.to_dict()))
    recs.append(exp.rec("final_ff", **final_ff_experiment(teacher, interp).to_dict()))
    kw = [e for e in interp if e.task == "keyword"]
    if kw:
        paths = pathway_search(teacher, kw)
        best = minimal_effective(paths)
        recs.append(exp.rec("pathways", n_samples=len(kw), pathways=[p.to_dict() for p in paths],
                            minimal=best.to_dict() if best else None))
    probe = transcription_probe(teacher, stats, interp, seed=exp.seed, random_draws=a["probe_random_draws"])
    recs.append(exp.rec("transcription_probe", **probe.to_dict()))
    tally = retrieval_tally(teacher, data["interp"], n_cases=a["tally_cases"], seed=exp.seed)
    recs.append(exp.rec("hypothesis_tally", **tally.to_dict()))
    write_records(out / "analysis.jsonl", recs)
    write_records(out / "tally_cases.jsonl", [exp.rec("tally_case", **c) for c in tally.cases])


def analysis_record(exp: Experiment, kind: str) -> dict:
    rs = find(exp.dir("analyze") / "analysis.jsonl", kind)
    if not rs:
        raise UsageError(f"analysis record {kind!r} is missing")
    return rs[0]


# ---------------------------------------------------------------- pruning


def _weight_saliency_order(model: MiniModel) -> list[HeadId]:
    """Heads by ``||W_v[:, head]|| * ||W_out[head, :]||`` ascending (least salient first)."""
    dh = model.config.d_head
    score = {}
    for s in model.present_sublayers():
        if not s.is_attention:
            continue
        p = _sub_prefix(s)
        wv, wo = model.params[f"{p}.v_proj.weight"].data, model.params[f"{p}.out_proj.weight"].data
        for j, h in enumerate(model.arch[s].heads):
            cols = slice(j * dh, (j + 1) * dh)
            score[HeadId(s, h)] = float(np.linalg.norm(wv[:, cols]) * np.linalg.norm(wo[cols, :]))
    return sorted(score, key=lambda h: (score[h], h))


def stage_prune(exp: Experiment, out: Path) -> None:
    data, teacher = exp.data(), exp.teacher()
    cfg, r = teacher.config, exp.cfg["recipe"]
    sel = _capped(data["selection"], exp.cfg["analysis"]["max_samples"])
    sweep = SweepResult.from_dict(analysis_record(exp, "skip_sweep"))
    rep = ReprojectionResult.from_dict(analysis_record(exp, "reprojection"))
    stats = HeadStats.from_dict(analysis_record(exp, "head_stats"))
    tasks = sorted({e.task for e in sel})
    by_task = {t: [e for e in sel if e.task == t] for t in tasks}

    def task_exact(masks: MaskSet) -> dict[str, float]:
        return {t: float(teacher_forced_exact(teacher, xs, masks).mean()) for t, xs in by_task.items()}

    def sel_ppl(masks: MaskSet) -> float:
        return token_nll(teacher, sel, masks).perplexity

    budgets = MintBudgets(r["coarse"], r["fine"], r["slack"], r["reintroduce_threshold"])
    coarse, fine = mint_recipe(cfg, stats, sweep, budgets, rep, task_exact)
    recipes: list[tuple[PruneRecipe, str]] = [(coarse, "mint"), (fine, "mint")]
    for i, m in enumerate(random_sublayer_masks(cfg, coarse, r["random_coarse"], exp.seed)):
        recipes.append((recipe_from_masks(f"random_coarse_{i}", cfg, m, r["coarse"]), "random_coarse"))
    for i, m in enumerate(random_head_masks(cfg, fine, r["random_heads"], exp.seed)):
        recipes.append((recipe_from_masks(f"random_heads_{i}", cfg, m, r["fine"]), "random_heads"))
    n, m = flop_shape(sel)
    cands = enumerate_students(cfg, StudentBudget(r["enumerate_params"], r["enumerate_flops"], n, m), r["enumerate_top"], sel_ppl)
    for i, (masks, score) in enumerate(cands):
        rec_ = recipe_from_masks(f"T{i + 1}", cfg, masks, r["enumerate_params"], notes=[f"selection perplexity {score:.6f}"])
        recipes.append((rec_, "enumeration"))
    if r["structured"]:
        st = structured_baseline(cfg, r["fine"], sel_ppl, _weight_saliency_order(teacher), r["slack"])
        recipes.append((st, "structured"))
    recs = []
    for rec_, family in recipes:
        masks = rec_.masks(cfg)
        recs.append(exp.rec("recipe", family=family, masks=masks.to_dict(), unstructured=False,
                            flop_fraction=flop_fraction(cfg, masks, n, m), **rec_.to_dict()))
    frac = r["unstructured_fraction"]
    if frac:
        sparsity = sparsity_for_fraction(teacher, frac)
        wm = magnitude_activation_prune(teacher, sel, sparsity)
        np.savez(out / "unstructured_masks.npz", **wm)
        recs.append(exp.rec(
            "recipe", family="unstructured", name="unstructured", masks=MaskSet.identity().to_dict(), unstructured=True,
            sparsity=sparsity, target_fraction=frac, flop_fraction=1.0,
            param_fraction=unmasked_decoder_params(teacher, wm) / teacher.num_parameters("decoder"),
            keep_sublayers=[str(s) for s in teacher.present_sublayers()], keep_heads=None, reintroduced=[], notes=[],
        ))
    write_records(out / "recipes.jsonl", recs)


def load_weight_masks(exp: Experiment) -> dict[str, np.ndarray]:
    with np.load(exp.dir("prune") / "unstructured_masks.npz") as z:
        return {k: z[k] for k in sorted(z.files)}


def student_from_recipe(exp: Experiment, teacher: MiniModel, rec: dict) -> tuple[MiniModel, Optional[dict]]:
    """Surgery-applied copy of the teacher (or a weight-masked copy for the unstructured baseline)."""
    if rec["unstructured"]:
        wm = load_weight_masks(exp)
        s = teacher.copy()
        apply_weight_masks(s, wm)
        return s, wm
    return apply_masks(teacher, MaskSet.from_dict(rec["masks"])), None


# ---------------------------------------------------------------- distillation


def stage_distill(exp: Experiment, out: Path) -> None:
    data, teacher = exp.data(), exp.teacher()
    kd = KDConfig(seed=exp.seed, **exp.cfg["kd"])
    frozen_before = parameter_digest(teacher, ("",))
    summary = []
    for rec in exp.recipes():
        name = rec["name"]
        student, wm = student_from_recipe(exp, teacher, rec)
        enc_before = parameter_digest(student)
        student, log = train_distill(student, teacher, data["train"], kd, weight_masks=wm)
        if parameter_digest(student) != enc_before:
            raise InvariantViolation(f"{name}: frozen encoder/embedding parameters changed during distillation")
        if wm is not None and any(np.any(student.params[k].data[~v] != 0.0) for k, v in wm.items()):
            raise InvariantViolation(f"{name}: masked weights became nonzero during distillation")
        save_checkpoint(out / "students" / f"{name}.ckpt", student, extra={"recipe": name}, mask_arrays=wm)
        write_records(out / "logs" / f"{name}.jsonl", [exp.rec("kd_step", recipe=name, **s.__dict__) for s in log.steps])
        last = log.steps[-1] if log.steps else None
        summary.append(exp.rec("distill", recipe=name, alpha=log.alpha, steps=len(log.steps), notes=log.notes,
                               first_total=log.steps[0].total if last else None, last_total=last.total if last else None))
        say(f"[distill] {name}: alpha {log.alpha:.4g}, final total {last.total if last else float('nan'):.4f}", 2)
    if parameter_digest(teacher, ("",)) != frozen_before:
        raise InvariantViolation("teacher parameters changed during distillation")
    write_records(out / "distill.jsonl", summary)


# ---------------------------------------------------------------- evaluation


def stage_eval(exp: Experiment, out: Path) -> None:
    data, teacher = exp.data(), exp.teacher()
    ev = data["evaluation"]
    mx = exp.cfg["eval"]["max_new"]
    seeds = [exp.seed]
    recs = [exp.rec("eval_report", phase="post", **evaluate(teacher, ev, split="evaluation", model_id=f"teacher-s{exp.seed}",
                                                            recipe_id="teacher", seeds=seeds, max_new=mx).to_dict())]
    for rec in exp.recipes():
        name = rec["name"]
        n_params = None
        if rec["unstructured"]:
            n_params = unmasked_decoder_params(teacher, load_weight_masks(exp))
        pre_model, _ = student_from_recipe(exp, teacher, rec)
        pre = evaluate(pre_model, ev, split="evaluation", model_id=f"{name}-pre-s{exp.seed}", recipe_id=name,
                       seeds=seeds, n_params=n_params, max_new=mx)
        post_model = load_checkpoint(exp.dir("distill") / "students" / f"{name}.ckpt")[0]
        post = evaluate(post_model, ev, split="evaluation", model_id=f"{name}-s{exp.seed}", recipe_id=name,
                        seeds=seeds, n_params=n_params, max_new=mx)
        recs.append(exp.rec("eval_report", phase="pre", family=rec["family"], **pre.to_dict()))
        recs.append(exp.rec("eval_report", phase="post", family=rec["family"], **post.to_dict()))
        say(f"[eval] {name}: ANLS pre {pre.anls:.4f} post {post.anls:.4f}", 2)
    write_records(out / "eval.jsonl", recs)


# ---------------------------------------------------------------- report


REPORT_INPUTS = (
    "analyze/analysis.jsonl",
    "prune/recipes.jsonl",
    "distill/distill.jsonl",
    "eval/eval.jsonl",
)


def _reports(path: Path, phase: str) -> list[EvalReport]:
    return [EvalReport.from_dict(r) for r in find(path, "eval_report") if r["phase"] == phase]


def ordering_checks(root: Path) -> dict:
    """Qualitative orderings for one experiment (keys match the acceptance criteria)."""
    root = Path(root)
    sweep = find(root / "analyze" / "analysis.jsonl", "skip_sweep")[0]
    evals = list(find(root / "eval" / "eval.jsonl", "eval_report"))
    post = {r["recipe_id"]: r for r in evals if r["phase"] == "post"}
    pre = {r["recipe_id"]: r for r in evals if r["phase"] == "pre"}
    fam = {r["recipe_id"]: r.get("family") for r in evals if r["phase"] == "post"}
    rc = [post[k]["anls"] for k in post if fam.get(k) == "random_coarse"]
    rh = [post[k]["anls"] for k in post if fam.get(k) == "random_heads"]
    top = sweep["most_critical"]
    out = {
        "top_unit": top,
        "top_is_cross_attention": top.startswith("C"),
        "mint_coarse_anls": post["mint_coarse"]["anls"],
        "random_coarse_mean_anls": float(np.mean(rc)) if rc else None,
        "coarse_beats_random": bool(rc) and post["mint_coarse"]["anls"] > float(np.mean(rc)),
        "mint_fine_anls": post["mint_fine"]["anls"],
        "random_heads_mean_anls": float(np.mean(rh)) if rh else None,
        "fine_at_least_random": bool(rh) and post["mint_fine"]["anls"] >= float(np.mean(rh)),
        "kd_recovery": {k: {"pre": pre[k]["anls"], "post": post[k]["anls"], "ok": post[k]["anls"] >= pre[k]["anls"]} for k in sorted(pre)},
    }
    out["kd_recovery_all"] = all(v["ok"] for v in out["kd_recovery"].values())
    return out


def _delta_table(title: str, deltas: dict[str, float], baseline: float) -> str:
    lines = [f"{title} (baseline perplexity {baseline:.4f})", f"{'unit':<12} {'delta':>12}"]
    lines += [f"{k:<12} {v:>12.4f}" for k, v in deltas.items()]
    return "\n".join(lines) + "\n"


def _cost_table(title: str, rows: dict[str, dict]) -> str:
    lines = [title, f"{'row':<16} {'ours':>16} {'reference':>16} {'rel err':>8}"]
    for k, v in rows.items():
        lines.append(f"{k:<16} {v['value']:>16.4g} {v['reference']:>16.4g} {100 * v['rel_err']:>7.2f}%")
    return "\n".join(lines) + "\n"


def account_records(cfg_hash: str, convention: Optional[str] = None) -> tuple[list[dict], str]:
    donut = donut_base_config()
    params = param_report(donut)
    conv = convention_report(donut)
    text = _cost_table("Donut-base parameters", params)
    chosen = convention or conv.best
    per = conv.to_dict()["per_layer"][chosen]
    ref = conv.to_dict()["reference"]
    rows = {k: {"value": per[k], "reference": ref[k], "rel_err": abs(per[k] - ref[k]) / ref[k]} for k in per}
    text += "\n" + _cost_table(f"Donut-base FLOPs per layer ({chosen}; n=42, m=35, 4800 patches)", rows)
    text += f"matching conventions: {', '.join(conv.matching) or 'none'}; best: {conv.best}\n"
    recs = [record("param_accounting", cfg_hash, rows=params), record("flops_conventions", cfg_hash, **conv.to_dict())]
    return recs, text


def render_report(root: Path) -> tuple[str, str, list[dict]]:
    """``(text, csv, summary records)`` from an experiment directory's stored records."""
    root = Path(root)
    missing = [p for p in REPORT_INPUTS if not (root / p).exists()]
    teacher_only = missing and (root / "teacher" / "train_log.jsonl").exists() and all(p != "teacher" for p in missing)
    if missing and not teacher_only:
        raise UsageError(f"missing reports: {', '.join(missing)}")
    snap = json.loads((root / "config.json").read_text(encoding="utf-8"))
    h = snap["config_hash"]
    if missing:
        t = EvalReport.from_dict(find(root / "teacher" / "train_log.jsonl", "teacher_eval")[0])
        rows = compare([t, t])[:1]
        return render_table(rows), to_csv([t]), [record("comparison", h, rows=[r.__dict__ for r in rows])]
    post = _reports(root / "eval" / "eval.jsonl", "post")
    pre = {r.recipe_id: r for r in _reports(root / "eval" / "eval.jsonl", "pre")}
    rows = compare(post)
    text = "Comparison (evaluation split, post-KD)\n" + render_table(rows)
    text += "\nPre-KD ANLS: " + ", ".join(f"{k} {100 * v.anls:.2f}" for k, v in sorted(pre.items())) + "\n"
    checks = ordering_checks(root)
    text += "\nOrdering checks\n" + "".join(f"  {k}: {v}\n" for k, v in checks.items() if k != "kd_recovery")
    analysis = root / "analyze" / "analysis.jsonl"
    sw = find(analysis, "skip_sweep")[0]
    text += "\n" + _delta_table("Skip sweep", sw["deltas"], sw["baseline"])
    rp = find(analysis, "reprojection")[0]
    text += "\n" + _delta_table("Token reprojection sweep", rp["deltas"], rp["baseline"])
    text += f"prune through: {rp['prune_through']}; earliest within tolerance: {rp['earliest_below']}\n"
    ff = find(analysis, "final_ff")[0]
    text += f"\nFinal feed-forward experiment ({ff['target']}): fraction of samples with perplexity <= threshold\n"
    text += "".join(f"  {k:<26} " + " ".join(f"{x:.2f}" for x in v) + "\n" for k, v in ff["curves"].items())
    tally = find(analysis, "hypothesis_tally")[0]
    text += f"\nRetrieval hypotheses ({tally['total']} cases, {tally['rejected']} rejected)\n"
    text += "".join(f"  {k:<11} {tally['counts'][k]:>5} {tally['percentages'][k]:>7.2f}%\n" for k in tally["counts"])
    text += "  reference (full-size model): " + json.dumps(tally["reference_percentages"], sort_keys=True) + "\n"
    acc_recs, acc_text = account_records(h)
    text += "\n" + acc_text
    summary = [record("comparison", h, rows=[r.__dict__ for r in rows]), record("ordering_checks", h, **checks)] + acc_recs
    return text, to_csv(post), summary


def stage_report(exp: Experiment, out: Path) -> None:
    text, csv_text, summary = render_report(exp.root)
    write_text(out / "report.txt", text)
    write_text(out / "table.csv", csv_text)
    write_records(out / "summary.jsonl", summary)


STAGE_FUNCS = {
    "data": stage_data,
    "teacher": stage_teacher,
    "analyze": stage_analyze,
    "prune": stage_prune,
    "distill": stage_distill,
    "eval": stage_eval,
    "report": stage_report,
}
