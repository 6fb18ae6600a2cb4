"""Density estimation on embedded manifolds by learned dequantization."""

__version__ = "0.1.0"
