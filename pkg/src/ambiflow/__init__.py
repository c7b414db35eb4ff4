"""Probabilistic 2D-to-3D pose lifting with conditional normalizing flows.

A small numpy package that models the posterior over 3D articulated poses
given 2D joint detections and their uncertainty.  An affine coupling flow
maps 3D poses to a 2D reprojection plus latent depth coordinates; sampling
the latent part yields diverse 3D hypotheses consistent with the observed
2D evidence, and heatmap covariances steer the spread per joint.
"""

__version__ = "0.1.0"

from . import errors, ndcore, posedisc, heatmap, flow, losses, metrics, data, trainer  # noqa: F401
from .errors import AmbiflowError  # noqa: F401
