"""Cascaded graph GANs predicting brain-graph evolution from a baseline scan."""

__version__ = "0.1.0"
