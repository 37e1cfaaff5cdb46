"""Continual anomaly detection on drifting tabular streams."""

__version__ = "0.1.0"
