"""Per-object layout statistics computed from keypoint coordinates."""

from __future__ import annotations

import numpy as np

from ..core import GeometricFeature, KeypointSet
from ..errors import UsageError


def geometric_feature(kps: KeypointSet | np.ndarray) -> GeometricFeature:
    """Mean, std, central moments of order 1-3 and scaled singular values, per axis.

    Singular values are those of the 2 x N centered coordinate matrix divided
    by sqrt(N), so they do not grow with the keypoint count.
    """
    pts = kps.points if isinstance(kps, KeypointSet) else np.asarray(kps, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise UsageError("geometric_feature needs at least one (x, y) point")
    n = len(pts)
    mu = pts.mean(axis=0)
    c = pts - mu
    m2 = np.mean(c**2, axis=0)
    m3 = np.mean(c**3, axis=0)
    sigma = np.sqrt(m2)
    if n > 1:
        sv = np.linalg.svd(c.T, compute_uv=False) / np.sqrt(n)
    else:
        sv = np.zeros(2)
    # first central moment is zero by construction; store it exactly
    m1 = np.zeros(2)
    return GeometricFeature(np.concatenate([mu, sigma, m1, m2, m3, sv]))
