"""Semi-supervised active learning for instance segmentation via triplet scoring."""

__version__ = "0.1.0"
