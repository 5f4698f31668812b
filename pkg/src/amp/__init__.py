"""Multiparty protocol machines: validation, projection to
communicating machines, and session type checking."""

__version__ = "0.1.0"
