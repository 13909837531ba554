"""Quantum-enhanced three-phase estimation in a four-arm interferometer."""

__version__ = "0.1.0"
