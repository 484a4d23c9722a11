"""Permissioned ledger middleware for vertically integrated process automation."""

__version__ = "0.1.0"
