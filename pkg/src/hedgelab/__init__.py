"""Desk-scale deep hedging laboratory."""

__version__ = "0.1.0"
