"""High-throughput rare-cell detection, segmentation, featurization and
classification for 3-channel immunofluorescence slides, with a synthetic
slide generator for ground truth and a review API for candidate sign-off.
"""

__version__ = "0.1.0"
