"""Feature graphs over depth rows.

Each pixel carries a 6-vector (surface normal, depth, grid location).  Edge
weights are ``exp(-d)`` with ``d`` the Mahalanobis distance under a learned
positive-definite metric ``M``; every pixel links to its four nearest
available pixels in the row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "RowGraph",
    "surface_normal",
    "normal_map",
    "pixel_features",
    "feature_distance",
    "build_row_laplacian",
    "glr_objective",
    "learn_metric",
    "MetricResult",
    "check_metric",
    "save_metric",
    "load_metric",
]

N_FEATURES = 6
TRACE = float(N_FEATURES)
PD_FLOOR = 1e-8  # relative to trace / 6
# the dominance guard keeps a margin above the floor that check_metric enforces
DOMINANCE_MARGIN = 10.0 * PD_FLOOR * TRACE / N_FEATURES


def surface_normal(points):
    """Unit normal of the least-squares plane through ``points`` (``(k, 3)``).

    Oriented towards a camera at the origin.  Returns ``(normal, ok)``; a
    degenerate (collinear or too small) neighbourhood gives the reversed
    viewing direction and ``ok=False``.
    """
    p = np.asarray(points, dtype=float)
    centroid = p.mean(axis=0) if p.size else np.zeros(3)
    view = -centroid / (np.linalg.norm(centroid) or 1.0)
    if p.shape[0] < 3:
        return (view if np.any(view) else np.array([0.0, 0.0, -1.0])), False
    q = p - centroid
    _, s, vt = np.linalg.svd(q, full_matrices=False)
    if s.size < 2 or s[1] <= 1e-9 * max(s[0], 1e-300):
        return (view if np.any(view) else np.array([0.0, 0.0, -1.0])), False
    n = vt[-1]
    if n @ centroid > 0 or (n @ centroid == 0 and n[2] > 0):
        n = -n
    return n / np.linalg.norm(n), True


def back_project(values, focal, cx, cy):
    H, W = values.shape
    jj, ii = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    z = values
    return np.stack([(jj - cx) * z / focal, (ii - cy) * z / focal, z], axis=-1)


def normal_map(values, mask, focal, cx, cy, rows=None):
    """Per-pixel normals from 8-connected neighbourhoods; ``(normals, ok)``.

    Vectorised plane fit: the normal is the eigenvector of the 3x3
    neighbourhood scatter matrix with the smallest eigenvalue.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    H, W = values.shape
    rows = np.arange(H) if rows is None else np.atleast_1d(rows)
    pts = back_project(values, focal, cx, cy)
    pp = np.pad(pts, ((1, 1), (1, 1), (0, 0)))
    mp = np.pad(mask, 1)
    sel_pts = []
    sel_ok = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            sel_pts.append(pp[rows + 1 + dy][:, 1 + dx : 1 + dx + W])
            sel_ok.append(mp[rows + 1 + dy][:, 1 + dx : 1 + dx + W])
    P = np.stack(sel_pts, axis=2)  # (R, W, 9, 3)
    O = np.stack(sel_ok, axis=2).astype(float)  # (R, W, 9)
    cnt = O.sum(axis=2)
    safe = np.maximum(cnt, 1.0)
    cen = (P * O[..., None]).sum(axis=2) / safe[..., None]
    Q = (P - cen[..., None, :]) * O[..., None]
    C = np.einsum("rwki,rwkj->rwij", Q, Q)
    evals, evecs = np.linalg.eigh(C)
    n = evecs[..., :, 0]
    flip = np.einsum("rwi,rwi->rw", n, cen) > 0
    n = np.where(flip[..., None], -n, n)
    ok = (cnt >= 3) & (evals[..., 1] > 1e-9 * np.maximum(evals[..., 2], 1e-300)) & mask[rows]
    view = -cen / np.maximum(np.linalg.norm(cen, axis=-1, keepdims=True), 1e-300)
    view = np.where(np.linalg.norm(cen, axis=-1, keepdims=True) > 0, view, np.array([0.0, 0.0, -1.0]))
    n = np.where(ok[..., None], n, view)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n, ok


def pixel_features(values, mask, focal, cx, cy, depth_scale, rows=None):
    """``(R, W, 6)`` features: unit normal, depth / depth_scale, (row, col) / width."""
    values = np.asarray(values, dtype=float)
    H, W = values.shape
    rows = np.arange(H) if rows is None else np.atleast_1d(rows)
    n, _ = normal_map(values, mask, focal, cx, cy, rows)
    jj = np.broadcast_to(np.arange(W, dtype=float), (rows.size, W))
    ii = np.broadcast_to(rows[:, None].astype(float), (rows.size, W))
    return np.concatenate(
        [n, (values[rows] / depth_scale)[..., None], (ii / W)[..., None], (jj / W)[..., None]], axis=-1
    )


def check_metric(M, eps_rel: float = PD_FLOOR):
    M = np.asarray(M, dtype=float)
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError("metric must be a symmetric square matrix")
    floor = eps_rel * np.trace(M) / M.shape[0]
    lam = np.linalg.eigvalsh(M)[0]
    if not lam > max(floor, 0.0):
        raise ValueError(f"metric is not positive definite (smallest eigenvalue {lam:.3e})")
    return M


def feature_distance(fi, fj, M):
    """Mahalanobis distance ``(fi - fj)^T M (fi - fj)``; vectorised over leading axes."""
    check_metric(M)
    d = np.asarray(fi, dtype=float) - np.asarray(fj, dtype=float)
    out = np.einsum("...i,ij,...j->...", d, M, d)
    return np.maximum(out, 0.0) if np.ndim(out) else max(float(out), 0.0)


@dataclass
class RowGraph:
    """Sparse Laplacian over the available pixels of one row (local indices)."""

    laplacian: sp.csr_matrix
    edges: np.ndarray  # (E, 2) local node indices, i < j
    weights: np.ndarray  # (E,)
    nodes: np.ndarray  # column index of each node
    flags: set = field(default_factory=set)

    @property
    def n(self) -> int:
        return self.nodes.size


def row_edges(n: int, reach: int = 2):
    """Edges ``(i, i+1), ..., (i, i+reach)`` between consecutive nodes."""
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    pairs = [np.stack([np.arange(n - r), np.arange(r, n)], axis=1) for r in range(1, reach + 1) if n - r > 0]
    return np.concatenate(pairs, axis=0)


def laplacian_from_edges(n, edges, weights):
    if edges.size == 0:
        return sp.csr_matrix((n, n))
    i, j = edges[:, 0], edges[:, 1]
    W = sp.coo_matrix((np.concatenate([weights, weights]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsr()


def build_row_laplacian(nodes, features, M) -> RowGraph:
    """Row graph linking each node to its two predecessors and two successors.

    ``nodes`` are the column indices of the available pixels (ascending) and
    ``features`` their ``(n, 6)`` feature vectors; consecutive entries are
    grid neighbours once holes are skipped.
    """
    nodes = np.asarray(nodes)
    features = np.asarray(features, dtype=float)
    n = nodes.size
    if n < 2:
        return RowGraph(sp.csr_matrix((n, n)), np.empty((0, 2), dtype=np.int64), np.empty(0), nodes, {"single_pixel"})
    edges = row_edges(n)
    d = feature_distance(features[edges[:, 0]], features[edges[:, 1]], M)
    # keep far-apart pairs connected instead of letting exp underflow to 0
    w = np.maximum(np.exp(-d), np.finfo(float).tiny)
    return RowGraph(laplacian_from_edges(n, edges, w), edges, w, nodes)


def _edge_terms(rows):
    """Stack ``(delta_features, squared_signal_difference)`` over all rows' edges."""
    deltas, diffs = [], []
    for x, f in rows:
        x = np.asarray(x, dtype=float)
        e = row_edges(x.size)
        if e.size == 0:
            continue
        deltas.append(f[e[:, 0]] - f[e[:, 1]])
        diffs.append((x[e[:, 0]] - x[e[:, 1]]) ** 2)
    if not deltas:
        return np.empty((0, N_FEATURES)), np.empty(0)
    return np.concatenate(deltas), np.concatenate(diffs)


def glr_objective(M, rows) -> float:
    """Graph Laplacian regularizer summed over ``rows`` = [(signal, features), ...]."""
    delta, c = _edge_terms(rows)
    d = np.einsum("ei,ij,ej->e", delta, M, delta)
    return float(np.sum(c * np.exp(-d)))


@dataclass
class MetricResult:
    M: np.ndarray
    history: list
    iterations: int
    flags: set = field(default_factory=set)


def _dominance_floor(M):
    """Smallest admissible diagonal per row: off-diagonal absolute row sum + margin."""
    off = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
    return off + DOMINANCE_MARGIN


def _project_diag(v, lower, total):
    """Euclidean projection of ``v`` onto ``{u >= lower, sum(u) = total}``."""
    if lower.sum() > total:
        raise ValueError("infeasible diagonal bounds")
    lo = np.min(v - lower) - total
    hi = np.max(v - lower) + total
    for _ in range(200):
        t = 0.5 * (lo + hi)
        s = np.maximum(v - t, lower).sum()
        if s > total:
            lo = t
        else:
            hi = t
    u = np.maximum(v - 0.5 * (lo + hi), lower)
    free = u > lower
    if free.any():
        # absorb the bisection residual so the trace is exact
        u[free] += (total - u.sum()) / free.sum()
    return u


def learn_metric(rows, maxiter: int = 100, tol: float = 1e-7, M0=None) -> MetricResult:
    """Minimise the graph Laplacian regularizer over PD metrics with ``trace(M) = 6``.

    ``rows`` is a list of ``(signal, features)`` pairs, one per previously
    enhanced row.  Diagonal and off-diagonal entries are updated alternately
    by projected gradient steps with backtracking; positive definiteness is
    kept by Gershgorin diagonal dominance.  Steps are only accepted if the
    objective does not increase.
    """
    delta, c = _edge_terms(rows)
    M = np.eye(N_FEATURES) if M0 is None else np.array(M0, dtype=float)
    if c.size == 0 or not np.any(c > 0):
        return MetricResult(np.eye(N_FEATURES), [0.0], 0, {"constant_rows"})
    # scale-free objective: the minimiser does not depend on the signal units
    c = c / c.sum()

    def obj(M):
        return float(c @ np.exp(-np.sum((delta @ M) * delta, axis=1)))

    def grad(M):
        u = c * np.exp(-np.sum((delta @ M) * delta, axis=1))
        return -(delta.T * u) @ delta

    f = obj(M)
    history = [f]
    step_d = step_o = 1.0
    it = 0
    off_mask = ~np.eye(N_FEATURES, dtype=bool)
    for it in range(1, maxiter + 1):
        f_start = f
        # diagonal block
        G = grad(M)
        gd = np.diag(G)
        lower = _dominance_floor(M)
        accepted = False
        for _ in range(40):
            d_new = _project_diag(np.diag(M) - step_d * gd, lower, TRACE)
            trial = M.copy()
            trial[np.diag_indices(N_FEATURES)] = d_new
            ft = obj(trial)
            if ft <= f:
                accepted = True
                break
            step_d *= 0.5
        if accepted:
            M, f = trial, ft
            step_d *= 2.0
        # off-diagonal block
        G = grad(M)
        accepted = False
        for _ in range(40):
            trial = M - step_o * np.where(off_mask, G, 0.0)
            trial = 0.5 * (trial + trial.T)
            off = np.abs(np.where(off_mask, trial, 0.0)).sum(axis=1)
            room = np.diag(trial) - DOMINANCE_MARGIN
            scale = np.min(np.where(off > 0, room / np.maximum(off, 1e-300), np.inf))
            if scale < 1.0:
                trial = np.where(off_mask, trial * max(scale, 0.0) * (1 - 1e-12), trial)
            ft = obj(trial)
            if ft <= f:
                accepted = True
                break
            step_o *= 0.5
        if accepted:
            M, f = trial, ft
            step_o *= 2.0
        history.append(f)
        if f_start - f <= tol * max(f_start, 1e-300):
            break
    check_metric(M)
    return MetricResult(M, history, it)


def save_metric(path, M):
    np.savetxt(path, np.asarray(M), fmt="%.17g")


def load_metric(path):
    return check_metric(np.loadtxt(path, dtype=float).reshape(N_FEATURES, N_FEATURES))
