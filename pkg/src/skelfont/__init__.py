"""Skeleton-guided font style transfer toolkit."""

__version__ = "0.1.0"
