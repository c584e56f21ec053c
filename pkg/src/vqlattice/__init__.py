"""Transducer lattice generation with vector-quantized prediction networks."""

__version__ = "0.1.0"
