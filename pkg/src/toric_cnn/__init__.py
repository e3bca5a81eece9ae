"""Convolutional neural-network decoding of 3D and 4D toric codes."""

__version__ = "0.1.0"
