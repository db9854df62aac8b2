"""Character-grid conditioned story generation, metrics, and corpus analytics."""

__version__ = "0.1.0"
