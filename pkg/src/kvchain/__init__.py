"""Desk-scale engine for chained prompt-tuned models sharing one KV cache."""

from . import bench, chain, layout, model, rope, tasks, tensor, trainer  # noqa: F401

__version__ = "0.1.0"
