"""voxstream: out-of-core volume processing and ensemble analysis."""

__version__ = "0.1.0"
