"""Training-data influence estimation by accumulated per-step difference terms."""

__version__ = "0.1.0"
