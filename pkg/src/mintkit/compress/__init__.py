"""Cost accounting, surgery and pruning recipes for decoder compression."""

from .accounting import (
    CONVENTIONS,
    REFERENCE_TABLE,
    ConventionError,
    ConventionReport,
    CostRow,
    CostTable,
    convention_report,
    count_flops,
    count_params,
    param_report,
    rel_err,
    sublayer_flops,
    sublayer_params,
)
from .recipes import (
    MintBudgets,
    PruneRecipe,
    StudentBudget,
    coarse_keep_set,
    decoder_fraction,
    enumerate_students,
    flop_fraction,
    mint_recipe,
    random_head_masks,
    random_sublayer_masks,
    recipe_from_masks,
    structured_baseline,
)
from .surgery import RecipeError, apply_masks, surgery_heads, surgery_sublayers
from .unstructured import (
    WeightMasks,
    apply_weight_masks,
    input_norms,
    magnitude_activation_prune,
    score_mask,
    sparsity_for_fraction,
    unmasked_decoder_params,
)

__all__ = [
    "CONVENTIONS", "REFERENCE_TABLE", "ConventionError", "ConventionReport", "CostRow", "CostTable",
    "MintBudgets", "PruneRecipe", "RecipeError", "StudentBudget", "WeightMasks",
    "apply_masks", "apply_weight_masks", "coarse_keep_set", "convention_report", "count_flops", "count_params",
    "decoder_fraction", "enumerate_students", "flop_fraction", "input_norms", "magnitude_activation_prune",
    "mint_recipe", "param_report", "random_head_masks", "random_sublayer_masks", "recipe_from_masks", "rel_err", "score_mask",
    "sparsity_for_fraction", "structured_baseline", "sublayer_flops", "sublayer_params", "surgery_heads",
    "surgery_sublayers", "unmasked_decoder_params",
]
