"""Field-boundary production pipeline: stitching, vectorization, 500 m
quality indicators, confidence modeling, and accuracy assessment."""

__version__ = "0.1.0"
