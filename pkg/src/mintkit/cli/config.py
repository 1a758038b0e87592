"""Run configuration: a YAML file with one block per module.

Schema (every key optional; defaults live in :data:`DEFAULTS`)::

    seed: 0                 # init, training, KD and random-baseline seed
    data:                   # synthdocs.DatasetSpec fields plus:
      seed: 1               #   dataset seed, independent of the run seed
      train_docs: 4000      #   teacher / KD training documents
      heldout_docs: 1000    #   split 20/20/60 into interp / selection / evaluation
      split: {interp: 0.2, selection: 0.2, evaluation: 0.6}
    model: {...}            # MiniModelConfig fields
    teacher: {...}          # TeacherConfig fields (seed comes from the run seed)
    analysis: {...}         # sample caps and tally size
    recipe: {...}           # budgets and baseline counts
    kd: {...}               # KDConfig fields (seed comes from the run seed)
    eval: {max_new: 8, convention: mac1/no-cache}
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from ..compress.accounting import CONVENTIONS
from ..model.config import ConfigError, MiniModelConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "seed": 1,
        "train_docs": 4000,
        "heldout_docs": 1000,
        "split": {"interp": 0.2, "selection": 0.2, "evaluation": 0.6},
        "n_keys": 8,
        "n_values": 8,
        "pairs_min": 3,
        "pairs_max": 5,
    },
    "model": {"encoder_attention": True},
    "teacher": {"lr": 2e-3, "batch_size": 32, "steps": 2000, "warmup": 100, "schedule": "cosine", "final_lr_fraction": 0.1, "eval_every": 500},
    "analysis": {"max_samples": 200, "tally_cases": 500, "reprojection_tol": 0.05, "probe_random_draws": 8},
    "recipe": {
        "coarse": 0.31,
        "fine": 0.07,
        "slack": 0.005,
        "reintroduce_threshold": 0.02,
        "random_coarse": 5,
        "random_heads": 3,
        "enumerate_params": 0.375,
        "enumerate_flops": 0.49,
        "enumerate_top": 3,
        "unstructured_fraction": 0.07,
        "structured": True,
    },
    "kd": {"temperature": 2.0, "alpha": "auto", "lr": 3e-4, "batch_size": 32, "steps": 300, "warmup_batches": 4, "clip": 1.0},
    "eval": {"max_new": 8, "convention": "mac1/no-cache"},
}

BLOCKS = tuple(k for k in DEFAULTS if k != "seed")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(raw: Optional[dict] = None, seed: Optional[int] = None, convention: Optional[str] = None) -> dict:
    """Defaults merged with ``raw`` and command-line overrides."""
    raw = raw or {}
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if convention is not None:
        cfg["eval"]["convention"] = convention
    if cfg["eval"]["convention"] not in CONVENTIONS:
        raise ConfigError(f"unknown FLOPs convention {cfg['eval']['convention']!r}; choose from {CONVENTIONS}")
    MiniModelConfig.from_dict(cfg["model"]).validate()
    return cfg


def parse_override(text: str) -> dict:
    """``"kd.steps=50"`` -> ``{"kd": {"steps": 50}}``; the value is read as YAML."""
    key, sep, value = text.partition("=")
    parts = key.strip().split(".")
    if not sep or len(parts) < 2 or not all(parts):
        raise ConfigError(f"override {text!r} must look like block.key=value")
    out: dict = {parts[-1]: yaml.safe_load(value)}
    for p in reversed(parts[:-1]):
        out = {p: out}
    return out


def load(
    path: Optional[str],
    seed: Optional[int] = None,
    convention: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for text in overrides:
        raw = _merge(raw, parse_override(text))
    return resolve(raw, seed, convention)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def model_config(cfg: dict) -> MiniModelConfig:
    return MiniModelConfig.from_dict(cfg["model"]).validate()
