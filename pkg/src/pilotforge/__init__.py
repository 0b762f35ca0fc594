"""Learned OFDM pilot placement and deep channel estimation."""

__version__ = "0.1.0"
