"""Surrogate-gradient spiking networks with deterministic and IVON training."""

__version__ = "0.1.0"
