"""Gated convolutional recurrent networks for audio tagging and weakly
supervised sound event detection."""

__version__ = "0.1.0"
