"""Deterministic DDIM inversion, trajectory gradients and immunization attacks at toy scale."""

__version__ = "0.1.0"
