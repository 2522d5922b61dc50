"""Query-based model extraction against object detectors, simulated."""

__version__ = "0.1.0"
