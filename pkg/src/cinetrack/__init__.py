"""Landmark detection and tracking for sparsely annotated cine sequences.

A detector finds the two chamber-wall landmarks in the first frame and
a correlation tracker propagates them through the rest; the two
branches supervise each other on unannotated frames, trained by a
three-phase adversarial schedule. Ships with a deterministic synthetic
phantom pipeline and an evaluation harness.
"""

__version__ = "0.1.0"

from .core import CineSequence, Heatmap, LandmarkPair, Motion2, Point2

__all__ = [
    "CineSequence",
    "Heatmap",
    "LandmarkPair",
    "Motion2",
    "Point2",
    "__version__",
]
