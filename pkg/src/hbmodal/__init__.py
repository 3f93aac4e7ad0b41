"""Hierarchical Bayesian updating of structural model classes from modal data."""
__version__ = "0.1.0"
