"""Simulator and algorithms for serving several LLM services on a shared GPU cluster."""

__version__ = "0.1.0"
