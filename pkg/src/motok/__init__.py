"""motok: whole-body motion tokenization, generation, retrieval, and metrics."""

__version__ = "0.1.0"
