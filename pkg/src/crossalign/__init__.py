"""Cross-modal contrastive alignment over precomputed feature sequences."""

__version__ = "0.1.0"
