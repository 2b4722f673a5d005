"""Known-region-aware domain alignment for open-world segmentation, at desk scale."""

__version__ = "0.1.0"
