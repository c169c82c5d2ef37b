"""Instruction-vagueness estimation for graph navigation agents."""

__version__ = "0.1.0"
