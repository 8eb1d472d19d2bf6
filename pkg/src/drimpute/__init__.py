"""Doubly-robust imputation for longitudinal data with monotone dropout."""
__version__ = "0.1.0"
