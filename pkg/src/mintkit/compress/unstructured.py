"""Magnitude-times-activation unstructured pruning of decoder weight matrices."""

from __future__ import annotations

import numpy as np

from ..interp.perplexity import Data, as_batch
from ..model.ids import site
from ..model.network import MiniModel, _sub_prefix
from ..synthdocs.vocab import PAD
from .. import tensor as T

WeightMasks = dict[str, np.ndarray]  # parameter name -> bool keep-mask of the weight's shape


def score_mask(weight: np.ndarray, input_norm: np.ndarray, sparsity: float) -> np.ndarray:
    """Keep-mask for one ``(in, out)`` weight.

    For every output unit (column) the ``round(sparsity * in)`` inputs with
    the lowest ``|W[i, j]| * ||x_i||`` are zeroed. Ties go to the lower
    input index being pruned first.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    n_in = weight.shape[0]
    k = int(round(sparsity * n_in))
    keep = np.ones(weight.shape, dtype=bool)
    if k == 0:
        return keep
    score = np.abs(weight) * input_norm[:, None]
    drop = np.argsort(score, axis=0, kind="stable")[:k]
    np.put_along_axis(keep, drop, False, axis=0)
    return keep


def _merge_heads(av: np.ndarray) -> np.ndarray:
    b, nh, t, dh = av.shape
    return av.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def input_norms(model: MiniModel, data: Data) -> dict[str, np.ndarray]:
    """``||x_i||`` over calibration tokens for the input of every decoder weight matrix.

    Only non-padding decoder positions contribute; cross-attention key and
    value projections see every patch.
    """
    b = as_batch(data)
    sites = []
    for sid in model.present_sublayers():
        sites.append(site(sid, "normed"))
        sites.append(site(sid, "av") if sid.is_attention else site(sid, "hidden"))
    with T.no_grad():
        enc = model.encode(b.grids)
        _, trace = model.decode(enc, b.inputs, capture=sites)
    valid = b.inputs != PAD
    enc_norm = np.sqrt((enc.data**2).sum(axis=(0, 1)))
    out: dict[str, np.ndarray] = {}

    def norm(x: np.ndarray) -> np.ndarray:
        return np.sqrt((x[valid] ** 2).sum(axis=0))

    for sid in model.present_sublayers():
        prefix = _sub_prefix(sid)
        normed = norm(trace[site(sid, "normed")])
        if sid.is_attention:
            out[f"{prefix}.q_proj.weight"] = normed
            kv = normed if sid.kind == "S" else enc_norm
            out[f"{prefix}.k_proj.weight"] = kv
            out[f"{prefix}.v_proj.weight"] = kv
            out[f"{prefix}.out_proj.weight"] = norm(_merge_heads(trace[site(sid, "av")]))
        else:
            out[f"{prefix}.fc1.weight"] = normed
            out[f"{prefix}.fc2.weight"] = norm(trace[site(sid, "hidden")])
    return out


def magnitude_activation_prune(model: MiniModel, calibration: Data, sparsity: float) -> WeightMasks:
    """Keep-masks for every decoder weight matrix at the requested per-row sparsity."""
    norms = input_norms(model, calibration)
    return {name: score_mask(model.params[name].data, xn, sparsity) for name, xn in sorted(norms.items())}


def apply_weight_masks(model: MiniModel, masks: WeightMasks) -> None:
    """Zero masked weights in place."""
    for name, keep in masks.items():
        p = model.params[name]
        if p.data.shape != keep.shape:
            raise ValueError(f"mask for {name} has shape {keep.shape}, weight has {p.data.shape}")
        p.data[~keep] = 0.0


def sparsity_for_fraction(model: MiniModel, fraction: float) -> float:
    """Per-matrix sparsity that leaves ``fraction`` of decoder parameters nonzero.

    Biases and norms are never pruned, so the weight matrices absorb the
    whole reduction.
    """
    total = model.num_parameters("decoder")
    weights = sum(
        p.data.size for n, p in model.named_parameters()
        if n.startswith("decoder.") and n.endswith(".weight") and p.data.ndim == 2
    )
    s = 1.0 - (fraction * total - (total - weights)) / weights
    if not 0.0 <= s < 1.0:
        raise ValueError(f"decoder fraction {fraction} is unreachable by pruning weight matrices alone")
    return s


def unmasked_decoder_params(model: MiniModel, masks: WeightMasks) -> int:
    """Decoder parameters left free by ``masks`` (biases and norms always count)."""
    n = 0
    for name, p in model.named_parameters():
        if name.startswith("decoder."):
            n += int(masks[name].sum()) if name in masks else p.data.size
    return n
