"""Domain generalisation for collaborative BEV segmentation at desk scale.

Fourier amplitude augmentation, meta-consistency training with an MMD
consistency loss, and LAB-space alignment across connected vehicles, run on
procedurally generated road scenes.
"""

__version__ = "0.1.0"
