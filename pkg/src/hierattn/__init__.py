"""Hierarchical attention networks with softmax, sparsemax and pruned attention."""

__version__ = "0.1.0"
