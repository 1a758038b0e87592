"""ANLS, exact match and perplexity reports, and cross-model comparison."""

from .report import CSV_COLUMNS, ComparisonRow, EvalReport, compare, evaluate, flop_shape, render_table, to_csv
from .similarity import ANLS_TAU, anls, exact_match, levenshtein, nls, normalize, sample_anls

__all__ = [
    "ANLS_TAU", "CSV_COLUMNS", "ComparisonRow", "EvalReport", "anls", "compare", "evaluate", "exact_match",
    "flop_shape", "levenshtein", "nls", "normalize", "render_table", "sample_anls", "to_csv",
]
