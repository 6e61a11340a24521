"""Ray-cast synthetic stereo scenes with exact ground-truth depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import DepthImage

__all__ = ["Plane", "render_depth", "render_pair", "two_plane_scene"]


@dataclass(frozen=True)
class Plane:
    """Plane ``Z = z0 + gx X + gy Y`` restricted to ``x_range x y_range`` (mm, left-camera frame)."""

    z0: float
    gx: float = 0.0
    gy: float = 0.0
    x_range: tuple[float, float] = (-np.inf, np.inf)
    y_range: tuple[float, float] = (-np.inf, np.inf)


def render_depth(planes, height, width, focal, center=(0.0, 0.0, 0.0), cx=None, cy=None):
    """Nearest-hit depth for a pinhole camera at ``center`` looking along +Z.

    Pixels whose ray meets no plane are missing.
    """
    cx = (width - 1) / 2.0 if cx is None else cx
    cy = (height - 1) / 2.0 if cy is None else cy
    jj, ii = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    dx, dy = (jj - cx) / focal, (ii - cy) / focal
    ox, oy, oz = center
    depth = np.full((height, width), np.inf)
    for p in planes:
        # oz + t = z0 + gx (ox + t dx) + gy (oy + t dy)
        den = 1.0 - p.gx * dx - p.gy * dy
        t = (p.z0 + p.gx * ox + p.gy * oy - oz) / np.where(np.abs(den) > 1e-12, den, np.nan)
        X, Y = ox + t * dx, oy + t * dy
        hit = (t > 0) & (X >= p.x_range[0]) & (X < p.x_range[1]) & (Y >= p.y_range[0]) & (Y < p.y_range[1])
        depth = np.where(hit & (t < depth), t, depth)
    mask = np.isfinite(depth)
    return np.where(mask, depth, 0.0), mask


def render_pair(planes, height, width, focal, baseline):
    """Rectified left/right views; the right camera sits at ``(baseline, 0, 0)``."""
    left = DepthImage(*render_depth(planes, height, width, focal), focal, baseline)
    right = DepthImage(*render_depth(planes, height, width, focal, (baseline, 0.0, 0.0)), focal, baseline)
    return left, right


def two_plane_scene(height: int = 64, width: int = 64, focal: float = 60.0, baseline: float = 50.0):
    """Two bounded planes tilted about the horizontal axis in front of a flat background.

    Depths stay within roughly 0.7 to 1.4 m so the noise law holds everywhere.
    """
    s = width / 64.0
    planes = [
        Plane(800.0, 0.0, 0.25, (-380.0 * s, -60.0 * s), (-300.0 * s, 300.0 * s)),
        Plane(1050.0, 0.0, -0.2, (60.0 * s, 480.0 * s), (-380.0 * s, 340.0 * s)),
        Plane(1400.0),
    ]
    return render_pair(planes, height, width, focal * s, baseline)
