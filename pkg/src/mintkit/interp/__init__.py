"""Interpretability toolkit: sweeps, patching, head statistics, pathway search, retrieval tally."""

from .heads import HeadStats, ProbeResult, head_statistics, importance_order, rank_heads, row_statistics, transcription_probe
from .pathways import Pathway, minimal_effective, pathway_route, pathway_search
from .patching import PatchExperiment, PatchSpec, activation_patch_experiment, mean_activation, overwrite, token_axis
from .perplexity import TokenNLL, as_batch, perplexity_teacher_forced, teacher_forced_exact, token_nll
from .retrieval import LABELS, REFERENCE_PERCENTAGES, HypothesisTally, classify_retrieval, label_output, retrieval_tally
from .sweeps import (
    CurveTable,
    ReprojectionResult,
    SweepResult,
    final_ff_experiment,
    reproject,
    skip_sweep,
    token_reprojection_sweep,
)

__all__ = [
    "CurveTable",
    "HeadStats",
    "HypothesisTally",
    "LABELS",
    "PatchExperiment",
    "PatchSpec",
    "Pathway",
    "ProbeResult",
    "REFERENCE_PERCENTAGES",
    "ReprojectionResult",
    "SweepResult",
    "TokenNLL",
    "activation_patch_experiment",
    "as_batch",
    "classify_retrieval",
    "final_ff_experiment",
    "head_statistics",
    "importance_order",
    "label_output",
    "mean_activation",
    "minimal_effective",
    "overwrite",
    "pathway_route",
    "pathway_search",
    "perplexity_teacher_forced",
    "rank_heads",
    "reproject",
    "retrieval_tally",
    "row_statistics",
    "skip_sweep",
    "teacher_forced_exact",
    "token_axis",
    "token_nll",
    "token_reprojection_sweep",
    "transcription_probe",
]
