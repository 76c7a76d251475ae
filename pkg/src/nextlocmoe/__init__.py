"""Next-location prediction with dual-level mixture-of-experts routing."""

__version__ = "0.1.0"
