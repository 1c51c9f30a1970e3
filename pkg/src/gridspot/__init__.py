"""Small-object detection on overhead imagery with a fine 26x26 prediction grid."""

__version__ = "0.1.0"
