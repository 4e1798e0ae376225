"""Seeded discrete-event simulator of a zero-touch industrial radio network."""

__version__ = "0.1.0"
