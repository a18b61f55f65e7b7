"""ADF Lab - adaptive-window derivative estimation and closed-loop experiments."""

__version__ = "0.1.0"
