"""Blind visible-watermark removal: two-stage SplitNet/RefineNet toolkit."""

__version__ = "0.1.0"
