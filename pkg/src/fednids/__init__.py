"""Federated NIDS privacy laboratory."""

__version__ = "0.1.0"
