"""Timing simulation and design space exploration of embedded GPUs."""

__version__ = "0.1.0"
