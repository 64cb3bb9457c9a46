"""Combo Retrieval - tree-based combo-attention video retrieval."""

__version__ = "0.1.0"
__license__ = "MIT"
