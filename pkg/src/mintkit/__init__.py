"""Interpretability-guided pruning and distillation workbench for a toy document-VQA transformer."""

__version__ = "0.1.0"
