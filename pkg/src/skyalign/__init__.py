"""Orientation-guided contrastive training for drone-to-satellite matching.

Pipeline pieces: azimuth pseudo-labels from camera poses, a synthetic
cross-view feature generator, a weight-shared encoder with an orientation
head trained by masked InfoNCE plus an orientation loss, and exact
brute-force retrieval evaluation.
"""

__version__ = "0.1.0"
