"""Conditional score-based generation with denoising likelihood score matching."""

__version__ = "0.1.0"
