"""Hierarchical tabular RL laboratory: options, Options-UCBVI, HLML, oracles."""

__version__ = "0.1.0"
