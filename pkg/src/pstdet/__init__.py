"""Pedestrian-sensitive proposal labeling with a frozen patch classifier."""

__version__ = "0.1.0"
