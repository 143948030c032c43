"""Amortized safe active learning on GP-simulated tasks."""

__version__ = "0.1.0"
