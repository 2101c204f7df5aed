"""LiDAR continual learning - class-incremental segmentation harness."""

__version__ = "0.1.0"
