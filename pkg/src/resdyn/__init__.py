"""Residual correction laboratory: simplified vehicle model, high-fidelity
surrogate, and a query-based Transformer that learns the gap between them."""

__version__ = "0.1.0"
