"""Metadata-gated low-rank adaptation with an NMF interpretability pipeline."""

__version__ = "0.1.0"
