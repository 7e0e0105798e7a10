"""Skeleton-aware dual autoencoder for kinodynamic motion retargeting."""

__version__ = "0.1.0"
