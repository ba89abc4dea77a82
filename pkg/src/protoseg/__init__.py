"""Few-shot point-cloud segmentation with multi-prototypes and label propagation."""

__version__ = "0.1.0"
