"""Estimation of optimal treatment rules and their value from right-censored data."""

__version__ = "0.1.0"
