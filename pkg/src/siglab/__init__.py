"""Pairwise sigmoid vs softmax contrastive losses for image-text pre-training, at desk scale."""

__version__ = "0.1.0"
