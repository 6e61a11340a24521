"""Fixtures shared by the module tests and the acceptance suite."""

import numpy as np

from depthgraph.enhance import prepare_view
from depthgraph.forward import DEFAULT_NOISE, DEFAULT_QUANTIZER, corrupt
from depthgraph.graph import build_row_laplacian
from depthgraph.scenes import Plane, render_pair
from depthgraph.solver import MapObjective, SolverConfig, assemble_prior, likelihood_coeffs, sigma_p
from depthgraph.warp import linearize_warp


def row_fixture(seed, n=32, two_view=True, q=DEFAULT_QUANTIZER):
    """Random linearized row objective around a smooth depth profile near 0.9 m.

    Returns ``(objective, x_tilde, (y, sigma, prior, right_view_kwargs))``.
    """
    rng = np.random.default_rng(seed)
    x_true = 900.0 + np.cumsum(rng.normal(0, 2, n))
    sigma = 1.4 + 1e-5 * (x_true - 528.0) ** 2
    y = x_true + rng.normal(0, sigma)
    xt = x_true + rng.normal(0, 0.2 * sigma)
    A = rng.normal(size=(6, 6))
    M = A @ A.T / 6 + 0.1 * np.eye(6)
    L = build_row_laplacian(np.arange(n), rng.normal(size=(n, 6)), M).laplacian
    kw = {}
    Lr = H = e = None
    if two_view:
        warp = linearize_warp(xt, 60.0, 40.0, n_right=n)
        J = np.flatnonzero(warp.nonempty)
        H, e = warp.jacobian[J], warp.offset[J]
        yr = H @ x_true + e + rng.normal(0, sigma[J])
        kw = dict(y_other=yr, sigma_other=sigma[J], jacobian=H, offset=e)
        Lr = build_row_laplacian(J, rng.normal(size=(J.size, 6)), M).laplacian
    prior = assemble_prior(L, sigma_p(np.mean(sigma**2), 1e-3, 0.1), 1e-3, 0.1, Lr, H, e)
    coeffs = likelihood_coeffs(y, xt, sigma, q, **kw)
    return MapObjective(coeffs, prior), xt, (y, sigma, prior, kw)


def power_iteration(A, iters=200, seed=0):
    """Rayleigh quotient after ``iters`` power steps from a random start."""
    v = np.random.default_rng(seed).normal(size=A.shape[0])
    for _ in range(iters):
        w = A @ v
        v = w / np.linalg.norm(w)
    return float(v @ (A @ v))


def plane_views(seed, depth=1000.0, q=DEFAULT_QUANTIZER, m=DEFAULT_NOISE, width=64, rows=4, cfg=None):
    """Corrupted fronto-parallel stereo pair, prepared for row enhancement."""
    left, right = render_pair([Plane(depth)], rows, width, 60.0, 40.0)
    cl = corrupt(left, q, m, seed=seed, stage=0)
    cr = corrupt(right, q, m, seed=seed, stage=1)
    cfg = cfg or SolverConfig()
    return left, cl, prepare_view(cl, q, m, cfg, seed), prepare_view(cr, q, m, cfg, seed), cfg
