"""LiDAR-only three-band BEV perception toolkit."""

__version__ = "0.1.0"
