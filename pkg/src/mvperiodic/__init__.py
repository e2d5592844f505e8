"""Particle laboratory for periodic laws of time-periodic McKean-Vlasov SDEs."""

__version__ = "0.1.0"
