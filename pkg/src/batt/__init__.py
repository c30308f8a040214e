"""Transformation-trigger backdoor toolkit: poison, train, evaluate, defend."""

__version__ = "0.1.0"
