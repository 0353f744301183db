"""Self-supervised gradient features: extraction, fusion, and evaluation."""

__version__ = "0.1.0"
