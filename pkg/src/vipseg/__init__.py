"""Training-free open-vocabulary segmentation with visually distilled class aliases."""

__version__ = "0.1.0"
