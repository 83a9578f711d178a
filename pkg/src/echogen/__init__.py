"""One-step conditional video flow matching on synthetic echo-like data."""

__version__ = "0.1.0"
