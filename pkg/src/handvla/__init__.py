"""Egocentric hand/camera tracks to atomic-action VLA episodes."""

__version__ = "0.1.0"
