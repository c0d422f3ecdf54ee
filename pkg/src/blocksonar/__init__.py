"""Passive Bitcoin network observatory: listen, classify, measure."""

__version__ = "0.1.0"
