"""Continual imitation learning with frozen backbones and per-suite adapters."""

__version__ = "0.1.0"
