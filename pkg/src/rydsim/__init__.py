"""Dissipative entanglement preparation in Rydberg-blockaded atom arrays."""

__version__ = "0.1.0"
