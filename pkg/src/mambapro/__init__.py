"""Bidirectional selective state-space blocks with a masked diagonal and a
residual history term, checked against an explicit attention-matrix oracle."""

__version__ = "0.1.0"
