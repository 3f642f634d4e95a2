"""Unsupervised convolutional image registration engine.

Trains small convolutional networks to predict affine and B-spline
transform parameters by optimizing image similarity, next to a
conventional iterative baseline and a displacement-field evaluation
suite. Exercised end-to-end on procedurally generated phantoms with
known ground-truth deformations.
"""

from .grids import DisplacementField, Geometry, Image, LandmarkSet, SegmentationMask

__all__ = [
    "DisplacementField",
    "Geometry",
    "Image",
    "LandmarkSet",
    "SegmentationMask",
]

__version__ = "0.1.0"
