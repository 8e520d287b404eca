"""Dynamic feature selection with hypernetwork-generated per-subset classifiers."""

__version__ = "0.1.0"
