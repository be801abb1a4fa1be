"""Desk-scale speech analysis engine: masked-prediction upstream, pooled linear heads."""

__version__ = "0.1.0"
