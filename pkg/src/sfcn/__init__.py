"""Siamesed fully convolutional road segmentation with a location prior."""

__version__ = "0.1.0"
