"""Behavioral simulator of mixed-precision in-memory training with PCM synapses."""

__version__ = "0.1.0"
