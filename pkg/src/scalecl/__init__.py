"""Continual-learning engine: replay scheduling, consolidation, LoRA and weight merging."""

__version__ = "0.1.0"
