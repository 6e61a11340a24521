"""Point clouds from depth images and point-to-point / point-to-plane errors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .forward import DepthImage

__all__ = [
    "PointCloud",
    "project_to_cloud",
    "normalize_cloud",
    "merge_clouds",
    "estimate_normals",
    "c2c",
    "c2p",
    "C2C_SCALE",
    "C2P_SCALE",
]

NORMAL_NEIGHBORS = 6
SCALE_EPS = 1e-12
# reporting scales of the metric tables
C2C_SCALE = 1e-3
C2P_SCALE = 1e-5


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points")

    def __len__(self):
        return self.points.shape[0]


def project_to_cloud(img: DepthImage, offset=(0.0, 0.0, 0.0)) -> PointCloud:
    """Pinhole back-projection of every available pixel, shifted by ``offset`` (camera centre)."""
    cx, cy = img.principal_point
    ii, jj = np.nonzero(img.mask)
    z = img.values[ii, jj]
    pts = np.stack([(jj - cx) * z / img.focal, (ii - cy) * z / img.focal, z], axis=1)
    return PointCloud(pts + np.asarray(offset, dtype=float))


def merge_clouds(*clouds: PointCloud) -> PointCloud:
    return PointCloud(np.concatenate([c.points for c in clouds], axis=0))


def normalize_cloud(pc: PointCloud) -> PointCloud:
    """Centre on the centroid and scale into the unit sphere."""
    if len(pc) == 0:
        return pc
    p = pc.points - pc.points.mean(axis=0)
    r = np.sqrt((p**2).sum(axis=1)).max()
    return replace(pc, points=p / max(r, SCALE_EPS))


def estimate_normals(points, k: int = NORMAL_NEIGHBORS, tree=None):
    """Unit normals from least-squares planes through the ``k`` nearest points (self included)."""
    p = np.asarray(points, dtype=float)
    if p.shape[0] == 0:
        return np.empty((0, 3))
    k = min(k, p.shape[0])
    tree = cKDTree(p) if tree is None else tree
    _, idx = tree.query(p, k=k)
    nb = p[np.asarray(idx).reshape(p.shape[0], k)]
    q = nb - nb.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", q, q)
    _, vecs = np.linalg.eigh(C)
    return vecs[:, :, 0]


def _nearest(reference: PointCloud, candidate: PointCloud):
    tree = cKDTree(candidate.points)
    dist, idx = tree.query(reference.points, k=1)
    return tree, dist, idx


def c2c(reference: PointCloud, candidate: PointCloud, symmetric: bool = False) -> float:
    """Mean distance from each reference point to its nearest candidate point.

    With ``symmetric=True`` the two directions are averaged.
    """
    if len(reference) == 0 or len(candidate) == 0:
        raise ValueError("clouds must be non-empty")
    _, dist, _ = _nearest(reference, candidate)
    out = float(dist.mean())
    if symmetric:
        out = 0.5 * (out + c2c(candidate, reference))
    return out


def c2p_terms(reference: PointCloud, candidate: PointCloud, k: int = NORMAL_NEIGHBORS):
    """Per-reference-point squared distance to the tangent plane at its nearest candidate point."""
    tree, _, idx = _nearest(reference, candidate)
    normals = candidate.normals if candidate.normals is not None else estimate_normals(candidate.points, k, tree)
    d = reference.points - candidate.points[idx]
    return np.einsum("ni,ni->n", d, normals[idx]) ** 2


def c2p(reference: PointCloud, candidate: PointCloud, symmetric: bool = False, k: int = NORMAL_NEIGHBORS) -> float:
    """Mean squared point-to-plane distance, normals from ``k`` candidate neighbours."""
    if len(reference) == 0 or len(candidate) == 0:
        raise ValueError("clouds must be non-empty")
    out = float(c2p_terms(reference, candidate, k).mean())
    if symmetric:
        out = 0.5 * (out + c2p(candidate, reference, k=k))
    return out
