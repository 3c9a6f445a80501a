"""Heart-sound (PCG) abnormality classification with a dual-stream CNN/GRU network."""

__version__ = "0.1.0"
