"""Desk-scale laboratory for hypersphere-constrained optimization and HyperP transfer."""

__version__ = "0.1.0"
