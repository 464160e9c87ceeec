"""Detection, box attention and segmentation on a minimal numpy autodiff core."""

__version__ = "0.1.0"
