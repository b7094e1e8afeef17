"""Compressed convolution networks for graphs, written against numpy."""

__version__ = "0.1.0"
