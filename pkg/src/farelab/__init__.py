"""Routing-level fairness diagnostics on toy Mixture-of-Experts models."""

__version__ = "0.1.0"
