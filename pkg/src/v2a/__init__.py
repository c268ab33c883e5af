"""Desk-scale laboratory for heterogeneous cross-domain offline RL."""

__version__ = "0.1.0"
