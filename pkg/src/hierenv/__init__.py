"""Hierarchical environment inference for invariant graph classification."""

__version__ = "0.1.0"
