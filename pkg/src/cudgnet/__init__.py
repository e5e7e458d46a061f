"""Contrastive uncertainty domain generalisation network (single-source DG)."""

__version__ = "0.1.0"
