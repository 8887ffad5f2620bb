"""Registration of longitudinal retinal fundus image pairs.

Affine homography plus one or two division-model radial distortions, fitted
to filtered SIFT correspondences and inverted exactly for warping.
"""
__version__ = "0.1.0"
