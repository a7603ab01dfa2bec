"""Multi-scale hierarchical graph fusion network for stock movement prediction."""

__version__ = "0.1.0"
