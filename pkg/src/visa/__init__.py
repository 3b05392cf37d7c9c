"""View-aware semantic alignment for aerial-ground person re-identification."""

__version__ = "0.1.0"
