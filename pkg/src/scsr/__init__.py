"""Stochastic cortical self-reconstruction (SCSR) and baseline normative models."""

__version__ = "0.1.0"
