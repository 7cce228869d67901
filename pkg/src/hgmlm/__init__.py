"""Metapath-based graph-to-text corpora and constrained masked-LM training."""

__version__ = "0.1.0"
