"""Left-to-right row mapping for rectified views.

A left pixel ``i`` with depth ``x`` lands at the real-valued right column
``s = i - f D / x``.  Right pixel ``j`` is interpolated from the left pixels
landing in ``[j - h, j + h)`` with normalised Gaussian weights; the
normaliser is frozen at the linearization point, which makes the mapping
``g(x) = W(x) x`` differentiable and gives the affine model ``H x + e``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "OcclusionWarning",
    "WarpModel",
    "disparity_and_position",
    "build_weight_matrix",
    "warp_apply",
    "linearize_warp",
]


class OcclusionWarning(UserWarning):
    pass


def disparity_and_position(i, x, focal, baseline, direction: int = -1):
    """Disparity ``f D / x`` and the projected column ``i + direction * disparity``.

    ``direction=-1`` maps left to right; ``+1`` maps right to left.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("depth must be positive")
    delta = focal * baseline / x
    s = np.asarray(i, dtype=float) + direction * delta
    if delta.ndim == 0:
        return float(delta), float(s)
    return delta, s


@dataclass
class _Contrib:
    j: np.ndarray  # right column
    i: np.ndarray  # local left index
    wbar: np.ndarray  # per right column (full width)
    n_right: int
    occluded: int = 0


def _contributors(cols, xhat, focal, baseline, n_right, h, sigma_s, direction, occlusion_tol):
    _, s = disparity_and_position(cols, xhat, focal, baseline, direction)
    js, iis = [], []
    for k in range(-h, h + 1):
        # j - h <= s < j + h  <=>  s - h < j <= s + h
        j = np.floor(s).astype(np.int64) + k
        ok = (j - h <= s) & (s < j + h) & (j >= 0) & (j < n_right)
        js.append(j[ok])
        iis.append(np.flatnonzero(ok))
    j = np.concatenate(js)
    i = np.concatenate(iis)
    occluded = 0
    if j.size and occlusion_tol is not None:
        # several surfaces in one neighbourhood: the nearest one wins
        near = np.full(n_right, np.inf)
        np.minimum.at(near, j, xhat[i])
        keep = xhat[i] <= near[j] * (1.0 + occlusion_tol)
        occluded = int((~keep).sum())
        j, i = j[keep], i[keep]
    order = np.lexsort((i, j))
    j, i = j[order], i[order]
    k = np.exp(-((s[i] - j) ** 2) / sigma_s**2)
    wbar = np.zeros(n_right)
    np.add.at(wbar, j, k)
    return _Contrib(j, i, wbar, n_right, occluded)


def build_weight_matrix(
    xhat,
    focal,
    baseline,
    h: int = 2,
    sigma_s: float = 1.0,
    n_right: int | None = None,
    cols=None,
    direction: int = -1,
    occlusion_tol: float | None = 0.05,
):
    """Sparse interpolation matrix ``W`` (``n_right x N``) and the mask of non-empty rows.

    ``cols`` are the column indices of the ``N`` left pixels (default
    ``0..N-1``).  Empty rows (no contributor) are all-zero and flagged.
    """
    xhat = np.asarray(xhat, dtype=float)
    cols = np.arange(xhat.size) if cols is None else np.asarray(cols)
    n_right = int(cols.max()) + 1 if n_right is None else n_right
    c = _contributors(cols, xhat, focal, baseline, n_right, h, sigma_s, direction, occlusion_tol)
    _, s = disparity_and_position(cols, xhat, focal, baseline, direction)
    k = np.exp(-((s[c.i] - c.j) ** 2) / sigma_s**2)
    W = sp.csr_matrix((k / c.wbar[c.j], (c.j, c.i)), shape=(n_right, xhat.size))
    return W, c.wbar > 0


@dataclass
class WarpModel:
    jacobian: sp.csr_matrix
    offset: np.ndarray
    linearization_point: np.ndarray
    neighborhood_h: int
    sigma_s: float
    nonempty: np.ndarray
    weights: sp.csr_matrix
    wbar: np.ndarray
    cols: np.ndarray
    focal: float
    baseline: float
    direction: int = -1
    flags: set = field(default_factory=set)
    normalizer: str = "constant"

    def apply(self, x):
        """Affine prediction ``H x + e`` of the right row."""
        return self.jacobian @ np.asarray(x, dtype=float) + self.offset


def warp_apply(x, model: WarpModel):
    """Exact ``g(x) = W(x) x`` with contributor sets frozen at the linearization point.

    The normalisers are frozen too unless the model was built with
    ``normalizer="exact"``, in which case they are recomputed at ``x``.
    """
    x = np.asarray(x, dtype=float)
    coo = model.weights.tocoo()
    j, i = coo.row, coo.col
    _, s = disparity_and_position(model.cols[i], x[i], model.focal, model.baseline, model.direction)
    k = np.exp(-((s - j) ** 2) / model.sigma_s**2)
    if model.normalizer == "exact":
        wbar = np.zeros(model.weights.shape[0])
        np.add.at(wbar, j, k)
    else:
        wbar = model.wbar
    out = np.zeros(model.weights.shape[0])
    np.add.at(out, j, k / np.where(wbar > 0, wbar, 1.0)[j] * x[i])
    return out


def linearize_warp(
    xhat,
    focal,
    baseline,
    h: int = 2,
    sigma_s: float = 1.0,
    n_right: int | None = None,
    cols=None,
    direction: int = -1,
    occlusion_tol: float | None = 0.05,
    normalizer: str = "constant",
) -> WarpModel:
    """First-order model ``g(x) ~ H x + e`` around the pre-filtered row ``xhat``.

    ``H[j, i] = w_ji (1 - 2 (s_i - j) (ds/dx_i) x_i / sigma_s^2)`` with
    ``ds/dx = -direction * f D / x^2`` when the normalizer ``wbar_j`` is held
    constant.  ``normalizer="exact"`` differentiates it too, which replaces
    ``x_i`` by ``x_i - g_j`` in that expression: moving a contributor then
    only shifts the interpolated depth by its offset from the local mean.
    """
    if normalizer not in ("constant", "exact"):
        raise ValueError(f"normalizer must be 'constant' or 'exact', got {normalizer!r}")
    xhat = np.asarray(xhat, dtype=float)
    cols = np.arange(xhat.size) if cols is None else np.asarray(cols)
    n_right = int(cols.max()) + 1 if n_right is None else n_right
    c = _contributors(cols, xhat, focal, baseline, n_right, h, sigma_s, direction, occlusion_tol)
    flags = set()
    if c.occluded:
        flags.add("occlusion")
        warnings.warn(f"{c.occluded} occluded contributors dropped", OcclusionWarning, stacklevel=2)
    _, s = disparity_and_position(cols, xhat, focal, baseline, direction)
    fd = focal * baseline
    si, xi = s[c.i], xhat[c.i]
    w = np.exp(-((si - c.j) ** 2) / sigma_s**2) / c.wbar[c.j]
    ds_dx = -direction * fd / xi**2
    shape = (n_right, xhat.size)
    W = sp.csr_matrix((w, (c.j, c.i)), shape=shape)
    g = W @ xhat
    lever = xi - g[c.j] if normalizer == "exact" else xi
    hval = w * (1.0 - 2.0 * (si - c.j) * ds_dx * lever / sigma_s**2)
    H = sp.csr_matrix((hval, (c.j, c.i)), shape=shape)
    e = g - H @ xhat
    nonempty = c.wbar > 0
    if not nonempty.any():
        flags.add("no_overlap")
    return WarpModel(H, e, xhat.copy(), h, sigma_s, nonempty, W, c.wbar, cols, focal, baseline, direction, flags, normalizer)
