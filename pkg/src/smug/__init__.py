"""Smoothed unrolling for robust MRI reconstruction at desk scale."""

__version__ = "0.1.0"
