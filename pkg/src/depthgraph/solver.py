"""Linearized MAP enhancement of depth rows.

Each quantization-bin likelihood is replaced by the integral of the tangent
line of the Gaussian density over the bin, which is affine in the unknown
depth.  Together with graph Laplacian priors on both views the row objective
is

    f(x) = -sum_i ln(at_i x_i + bt_i) - sum_j ln(ab_j (H x)_j + bb_j)
           + (x^T Lc x + 2 h^T x) / sigma_p^2

and is minimised by accelerated gradient descent with the step bounded by
Gershgorin discs of ``Lc``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .forward import QuantizerParams, bin_edges, quantization_mapping
from .graph import build_row_laplacian
from .warp import OcclusionWarning, linearize_warp

__all__ = [
    "LikelihoodCoeffs",
    "PriorWeights",
    "SolverConfig",
    "SolverState",
    "AGDResult",
    "MapObjective",
    "RelinearizedObjective",
    "RowData",
    "RowResult",
    "linearize_gaussian",
    "bin_coeffs",
    "likelihood_coeffs",
    "assemble_prior",
    "assemble_objective",
    "gradient",
    "gct_step_bound",
    "gershgorin_bound",
    "log_hessian_ratio",
    "agd_solve",
    "gd_solve",
    "sigma_p",
    "enhance_row",
]

log = logging.getLogger(__name__)

FACTOR_FLOOR = 1e-12
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
HESSIAN_RATIO_LIMIT = 0.10
_KERNEL_FLAGS = (
    (_kernels.FLAG_BACKTRACKED, "backtracked"),
    (_kernels.FLAG_MOMENTUM_RESET, "momentum_reset"),
    (_kernels.FLAG_MAXITER, "maxiter"),
)


@dataclass
class SolverConfig:
    h: int = 2
    sigma_s: float = 1.0
    g1: float = 1e-3  # depths in mm
    g2: float = 0.1
    eps: float = 1e-8
    outer_passes: int = 3
    K: int = 30
    k_max: int = 10
    maxiter: int = 2000
    metric_iters: int = 20
    consistency: float = 3.0  # right-pixel gate in noise SDs
    relinearize: str = "iteration"  # "iteration" or "pass"
    warp_normalizer: str = "constant"  # "constant" or "exact"

    def __post_init__(self):
        if self.h < 1 or self.sigma_s <= 0:
            raise ValueError("h must be >= 1 and sigma_s positive")
        if self.g1 < 0:
            raise ValueError(f"g1 must be non-negative, got {self.g1}")
        if self.eps < 0 or self.outer_passes < 1 or self.K < 1 or self.k_max < 1 or self.maxiter < 1:
            raise ValueError("eps >= 0 and outer_passes, K, k_max, maxiter >= 1 required")
        if self.relinearize not in ("iteration", "pass"):
            raise ValueError(f"relinearize must be 'iteration' or 'pass', got {self.relinearize!r}")


def linearize_gaussian(n0, sigma):
    """Tangent line ``a n + b`` of the zero-mean Gaussian density at ``n0``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    n0 = np.asarray(n0, dtype=float)
    p = INV_SQRT_2PI / sigma * np.exp(-0.5 * (n0 / sigma) ** 2)
    a = -n0 / sigma**2 * p
    b = p - a * n0
    if a.ndim == 0:
        return float(a), float(b)
    return a, b


def bin_coeffs(a, b, z_lo, z_hi):
    """``(at, bt)`` with ``at x + bt = integral of (a n + b) over [z_lo - x, z_hi - x]``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    z_lo, z_hi = np.asarray(z_lo, dtype=float), np.asarray(z_hi, dtype=float)
    w = z_hi - z_lo
    at = -a * w
    bt = w * (0.5 * a * (z_hi + z_lo) + b)
    return at, bt


@dataclass
class LikelihoodCoeffs:
    """Affine likelihood factors of one row.

    ``a_tilde[i]`` is the single nonzero of the left row vector for pixel
    ``i``; ``a_bar[j]`` multiplies ``(H x)_j`` for right pixel ``j``.
    ``b_bar`` already contains the ``a_bar * e`` offset.
    """

    a_tilde: np.ndarray
    b_tilde: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    linearization_noise: tuple
    jacobian: sp.csr_matrix | None = None
    flags: set = field(default_factory=set)


def likelihood_coeffs(
    y,
    x_tilde,
    sigma,
    q: QuantizerParams,
    y_other=None,
    sigma_other=None,
    jacobian=None,
    offset=None,
) -> LikelihoodCoeffs:
    """Linearize every bin likelihood of the row around ``n0 = y - x_tilde``.

    The optional second view contributes through the affine warp
    ``H x + e``: its noise is linearized at ``y_other - (H x_tilde + e)``.
    """
    y = np.asarray(y, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    z_lo, z_hi = bin_edges(quantization_mapping(y, q), q)
    n0 = y - x_tilde
    a, b = linearize_gaussian(n0, np.broadcast_to(sigma, y.shape))
    at, bt = bin_coeffs(a, b, z_lo, z_hi)
    flags = set()
    if y_other is None or len(y_other) == 0:
        n = 0 if jacobian is None else jacobian.shape[1]
        H = sp.csr_matrix((0, x_tilde.size)) if jacobian is None else sp.csr_matrix((0, n))
        ab, bb, n0r = np.empty(0), np.empty(0), np.empty(0)
    else:
        H = sp.csr_matrix(jacobian)
        y_other = np.asarray(y_other, dtype=float)
        pred = H @ x_tilde + offset
        zr_lo, zr_hi = bin_edges(quantization_mapping(y_other, q), q)
        n0r = y_other - pred
        ar, br = linearize_gaussian(n0r, np.broadcast_to(sigma_other, y_other.shape))
        ab, bt_r = bin_coeffs(ar, br, zr_lo, zr_hi)
        bb = bt_r + ab * offset
    coeffs = LikelihoodCoeffs(at, bt, ab, bb, (n0, n0r), H, flags)
    fl, fr = _factors(coeffs, x_tilde)
    # factors that underflow at the linearization point carry no usable
    # evidence; freeze them at the floor so they drop out of the gradient
    for fac, a_, b_ in ((fl, coeffs.a_tilde, coeffs.b_tilde), (fr, coeffs.a_bar, coeffs.b_bar)):
        bad = fac <= FACTOR_FLOOR
        if np.any(bad):
            flags.add("factor_floored")
            a_[bad] = 0.0
            b_[bad] = FACTOR_FLOOR
    return coeffs


def _factors(c: LikelihoodCoeffs, x):
    fl = c.a_tilde * x + c.b_tilde
    fr = c.a_bar * (c.jacobian @ x) + c.b_bar if c.a_bar.size else np.empty(0)
    return fl, fr


@dataclass
class PriorWeights:
    sigma_p_sq: float
    g1: float
    g2: float
    laplacian_combined: sp.csr_matrix
    h_vec: np.ndarray


def sigma_p(sigma_bar_sq, g1: float, g2: float) -> float:
    """Prior variance ``1 / (g1 sigma_bar^2 + g2)``; noisier layers get a stronger prior."""
    den = g1 * sigma_bar_sq + g2
    if not den > 0:
        raise ValueError(f"g1 * sigma_bar^2 + g2 must be positive, got {den}")
    return 1.0 / den


def assemble_prior(L_left, sigma_p_sq, g1=1.0, g2=0.1, L_right=None, jacobian=None, offset=None) -> PriorWeights:
    """``Lc = L_l + H^T L_r H`` and ``h = H^T L_r e`` from the two row graphs."""
    Lc = sp.csr_matrix(L_left, dtype=float)
    h = np.zeros(Lc.shape[0])
    if L_right is not None and jacobian is not None and jacobian.shape[0]:
        H = sp.csr_matrix(jacobian)
        LH = sp.csr_matrix(L_right) @ H
        Lc = (Lc + H.T @ LH).tocsr()
        h = np.asarray(LH.T @ offset).ravel()
    return PriorWeights(float(sigma_p_sq), g1, g2, Lc, h)


class MapObjective:
    """Objective, gradient and domain test for one linearized row.

    Outside the domain (some factor ``<= 0``) the value is ``+inf``, which
    is the boundary signal the solvers react to.
    """

    def __init__(self, coeffs: LikelihoodCoeffs, prior: PriorWeights):
        self.c = coeffs
        self.p = prior
        self.inv_sp = 1.0 / prior.sigma_p_sq
        n = prior.laplacian_combined.shape[0]
        H = coeffs.jacobian if coeffs.jacobian is not None else sp.csr_matrix((0, n))
        self.H = sp.csr_matrix(H, dtype=float)
        self.HT = self.H.T.tocsr()
        self.L = sp.csr_matrix(prior.laplacian_combined, dtype=float)
        self.has_right = coeffs.a_bar.size > 0

    def factors(self, x):
        fl = self.c.a_tilde * x + self.c.b_tilde
        fr = self.c.a_bar * (self.H @ x) + self.c.b_bar if self.has_right else np.empty(0)
        return fl, fr

    def in_domain(self, x) -> bool:
        fl, fr = self.factors(x)
        return bool(fl.min() > 0 and (not self.has_right or fr.min() > 0))

    def value_and_grad(self, x):
        fl, fr = self.factors(x)
        inside = fl.min() > 0 and (not self.has_right or fr.min() > 0)
        fl_ = np.maximum(fl, FACTOR_FLOOR)
        Lx = self.L @ x
        h = self.p.h_vec
        val = -np.log(fl_).sum() + self.inv_sp * (x @ Lx + 2.0 * (h @ x))
        g = -self.c.a_tilde / fl_ + 2.0 * self.inv_sp * (Lx + h)
        if self.has_right:
            fr_ = np.maximum(fr, FACTOR_FLOOR)
            val -= np.log(fr_).sum()
            g -= self.HT @ (self.c.a_bar / fr_)
        return (float(val) if inside else math.inf), g

    def __call__(self, x):
        return self.value_and_grad(np.asarray(x, dtype=float))[0]

    def grad(self, x):
        return self.value_and_grad(np.asarray(x, dtype=float))[1]

    def log_hessian(self, x):
        """Sum of the two log-term Hessians (sparse)."""
        fl, fr = self.factors(x)
        D = sp.diags(self.c.a_tilde**2 / np.maximum(fl, FACTOR_FLOOR) ** 2)
        if self.has_right:
            D = D + self.HT @ sp.diags(self.c.a_bar**2 / np.maximum(fr, FACTOR_FLOOR) ** 2) @ self.H
        return sp.csr_matrix(D)

    def log_hessian_bound(self, x) -> float:
        """Upper bound on the Gershgorin bound of :meth:`log_hessian`, in O(nnz).

        Uses ``sum_j |(H^T D H)_ij| <= sum_k |H_ki| D_k sum_j |H_kj|``.
        """
        fl, fr = self.factors(x)
        d = self.c.a_tilde**2 / np.maximum(fl, FACTOR_FLOOR) ** 2
        if self.has_right:
            absH = abs(self.H)
            dr = self.c.a_bar**2 / np.maximum(fr, FACTOR_FLOOR) ** 2
            d = d + absH.T @ (dr * np.asarray(absH.sum(axis=1)).ravel())
        return float(d.max(initial=0.0))

    def solve(self, x0, beta, eps: float = 1e-8, maxiter: int = 2000) -> "AGDResult":
        """:func:`agd_solve` on this objective, run by the compiled kernel."""
        arrs = _csr_arrays(self.H, self.HT, self.L)
        x0 = np.ascontiguousarray(x0, dtype=float)
        x, val, gn, it, conv, fl = _kernels.agd_map(
            x0, self.c.a_tilde, self.c.b_tilde, self.c.a_bar, self.c.b_bar, *arrs,
            np.ascontiguousarray(self.p.h_vec, dtype=float), self.inv_sp, FACTOR_FLOOR, float(beta), float(eps), int(maxiter),
        )
        if not math.isfinite(val) and it == 0:
            raise ValueError("initial point outside the objective domain")
        flags = {name for bit, name in _KERNEL_FLAGS if fl & bit}
        return AGDResult(x, float(val), float(gn), int(it), bool(conv), flags)


def _csr_arrays(*mats):
    arrs = []
    for A in mats:
        A = A.tocsr()
        arrs += [A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(float)]
    return arrs


class RelinearizedObjective:
    """Row objective whose likelihood is re-linearized at every query point.

    ``value_and_grad(x)`` linearizes all bin likelihoods around ``x`` itself
    and evaluates the resulting :class:`MapObjective` there.  Each factor is
    then positive at its own linearization point, so every point is
    admissible, and the likelihood gradient behaves like ``(x - y) / sigma^2``
    rather than the unbounded slope of a single fixed tangent line.
    """

    def __init__(self, y, sigma, q: QuantizerParams, prior: PriorWeights, y_other=None, sigma_other=None, jacobian=None, offset=None):
        self.y = np.asarray(y, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), self.y.shape).copy()
        self.q = q
        self.p = prior
        self.inv_sp = 1.0 / prior.sigma_p_sq
        n = self.y.size
        self.z_lo, self.z_hi = bin_edges(quantization_mapping(self.y, q), q)
        if y_other is None or len(y_other) == 0:
            self.y_other = self.sigma_other = self.offset = self.zr_lo = self.zr_hi = np.empty(0)
            self.H = sp.csr_matrix((0, n))
        else:
            self.y_other = np.asarray(y_other, dtype=float)
            self.sigma_other = np.broadcast_to(np.asarray(sigma_other, dtype=float), self.y_other.shape).copy()
            self.offset = np.asarray(offset, dtype=float)
            self.H = sp.csr_matrix(jacobian, dtype=float)
            self.zr_lo, self.zr_hi = bin_edges(quantization_mapping(self.y_other, q), q)
        self.HT = self.H.T.tocsr()
        self.L = sp.csr_matrix(prior.laplacian_combined, dtype=float)

    def coeffs(self, x) -> LikelihoodCoeffs:
        yr = self.y_other if self.y_other.size else None
        return likelihood_coeffs(self.y, x, self.sigma, self.q, yr, self.sigma_other, self.H, self.offset)

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        return MapObjective(self.coeffs(x), self.p).value_and_grad(x)

    def __call__(self, x):
        return self.value_and_grad(x)[0]

    def grad(self, x):
        return self.value_and_grad(x)[1]

    def curvature_bound(self) -> float:
        """Disc bound of the Gaussian curvature ``diag(1/sigma^2) + H^T diag(1/sigma_r^2) H``."""
        d = 1.0 / self.sigma**2
        if self.y_other.size:
            absH = abs(self.H)
            rows = np.asarray(absH.sum(axis=1)).ravel()
            d = d + absH.T @ (rows / self.sigma_other**2)
        return float(d.max(initial=0.0))

    def solve(self, x0, beta, eps: float = 1e-8, maxiter: int = 2000) -> "AGDResult":
        """:func:`agd_solve` on this objective, run by the compiled kernel."""
        x0 = np.ascontiguousarray(x0, dtype=float)
        x, val, gn, it, conv, fl = _kernels.agd_relin(
            x0, self.y, self.sigma, self.z_lo, self.z_hi,
            self.y_other, self.sigma_other, self.zr_lo, self.zr_hi, self.offset,
            *_csr_arrays(self.H, self.HT, self.L),
            np.ascontiguousarray(self.p.h_vec, dtype=float), self.inv_sp, FACTOR_FLOOR, float(beta), float(eps), int(maxiter),
        )
        flags = {name for bit, name in _KERNEL_FLAGS if fl & bit}
        return AGDResult(x, float(val), float(gn), int(it), bool(conv), flags)


def assemble_objective(coeffs: LikelihoodCoeffs, prior: PriorWeights) -> MapObjective:
    return MapObjective(coeffs, prior)


def gradient(x, coeffs: LikelihoodCoeffs, prior: PriorWeights):
    return MapObjective(coeffs, prior).grad(x)


def gershgorin_bound(A) -> float:
    """``max_i (A_ii + sum_{j != i} |A_ij|)`` in one pass over the nonzeros."""
    A = sp.csr_matrix(A)
    if A.shape[0] == 0:
        return 0.0
    absA = abs(A)
    rows = np.asarray(absA.sum(axis=1)).ravel()
    d = A.diagonal()
    return float(np.max(rows - np.abs(d) + d))


def gct_step_bound(prior: PriorWeights) -> float:
    """Smoothness bound ``(2 / sigma_p^2) * Gershgorin bound of Lc``."""
    return 2.0 / prior.sigma_p_sq * gershgorin_bound(prior.laplacian_combined)


def log_hessian_ratio(obj: MapObjective, x) -> float:
    """Gershgorin bound of the log-term Hessian relative to the prior bound.

    Inflating the prior bound by ``1 + ratio`` adds the two disc bounds.
    """
    beta = gct_step_bound(obj.p)
    if beta <= 0:
        return math.inf
    return gershgorin_bound(obj.log_hessian(x)) / beta


@dataclass
class SolverState:
    x: np.ndarray
    c: np.ndarray
    eta: float
    gamma: float
    t: int
    beta_tilde: float


@dataclass
class AGDResult:
    x: np.ndarray
    value: float
    grad_norm_sq: float
    iterations: int
    converged: bool
    flags: set = field(default_factory=set)


def _next_eta(eta):
    return (1.0 + math.sqrt(1.0 + 4.0 * eta * eta)) / 2.0


def agd_solve(fun, x0, beta, eps: float = 1e-8, maxiter: int = 2000, domain=None) -> AGDResult:
    """Accelerated gradient descent with momentum sequence ``eta`` and step ``1/beta``.

    ``fun(x)`` returns ``(value, gradient)``; ``domain(x)`` (optional) tells
    whether ``x`` is admissible.  Inadmissible gradient steps are halved
    until admissible; inadmissible extrapolations fall back to the plain
    gradient step.  Stops at the first iterate with ``|grad|^2 < eps``;
    otherwise returns the best iterate seen.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = np.array(x0, dtype=float)
    st = SolverState(x=x, c=x.copy(), eta=0.0, gamma=0.0, t=1, beta_tilde=beta)
    flags = set()
    val, g = fun(x)
    if not math.isfinite(val) or (domain is not None and not domain(x)):
        raise ValueError("initial point outside the objective domain")
    best = (val, x.copy(), float(g @ g))
    eta_next = _next_eta(st.eta)
    while True:
        gn = float(g @ g)
        if gn < eps:
            return AGDResult(st.x, val, gn, st.t - 1, True, flags)
        if st.t > maxiter:
            break
        step = 1.0 / beta
        c_new = st.x - step * g
        if domain is not None:
            while not domain(c_new):
                flags.add("backtracked")
                step *= 0.5
                if step * beta < 1e-30:
                    c_new = st.x.copy()
                    break
                c_new = st.x - step * g
        st.eta = eta_next
        eta_next = _next_eta(st.eta)
        st.gamma = (1.0 - st.eta) / eta_next
        x_new = (1.0 - st.gamma) * c_new + st.gamma * st.c
        val, g = fun(x_new)
        if not math.isfinite(val):
            flags.add("momentum_reset")
            x_new = c_new
            val, g = fun(x_new)
        st.c, st.x = c_new, x_new
        st.t += 1
        if val < best[0]:
            best = (val, st.x.copy(), float(g @ g))
    flags.add("maxiter")
    return AGDResult(best[1], best[0], best[2], maxiter, False, flags)


def gd_solve(fun, x0, beta, eps: float = 1e-8, maxiter: int = 100000, domain=None) -> AGDResult:
    """Plain gradient descent with step ``1/beta`` (reference for :func:`agd_solve`)."""
    x = np.array(x0, dtype=float)
    val, g = fun(x)
    flags = set()
    for t in range(maxiter + 1):
        gn = float(g @ g)
        if gn < eps:
            return AGDResult(x, val, gn, t, True, flags)
        if t == maxiter:
            break
        step = 1.0 / beta
        x_new = x - step * g
        while domain is not None and not domain(x_new):
            flags.add("backtracked")
            step *= 0.5
            x_new = x - step * g
        x = x_new
        val, g = fun(x)
    flags.add("maxiter")
    return AGDResult(x, val, float(g @ g), maxiter, False, flags)


@dataclass
class RowData:
    """One row of a view with everything the row solver reads.

    ``sigma`` is the per-pixel noise SD from the layer assignment and
    ``layer_var`` the per-layer variances indexed by ``labels``.
    """

    y: np.ndarray
    mask: np.ndarray
    xhat: np.ndarray
    labels: np.ndarray
    sigma: np.ndarray
    layer_var: np.ndarray
    features: np.ndarray


@dataclass
class RowResult:
    x: np.ndarray
    iterations: int
    objective: float
    flags: set = field(default_factory=set)


def _right_rows(warp, seg_local, other: RowData, cfg: SolverConfig, q: QuantizerParams):
    """Right pixels fed only by the segment and consistent with the prediction at ``xhat``."""
    W = warp.weights.tocsr()
    in_seg = np.zeros(W.shape[1], dtype=bool)
    in_seg[seg_local] = True
    counts = np.diff(W.indptr)
    cs = np.concatenate([[0], np.cumsum(in_seg[W.indices])])
    inside = cs[W.indptr[1:]] - cs[W.indptr[:-1]]
    J = np.flatnonzero((counts > 0) & (inside == counts) & other.mask)
    if J.size == 0:
        return J
    pred = warp.offset[J] + warp.jacobian[J] @ warp.linearization_point
    y = other.y[J]
    gate = cfg.consistency * other.sigma[J] + q.bin_width(quantization_mapping(y, q))
    return J[np.abs(y - pred) <= gate]


def enhance_row(
    row: RowData,
    other: RowData | None,
    M,
    q: QuantizerParams,
    focal: float,
    baseline: float,
    cfg: SolverConfig = SolverConfig(),
    direction: int = -1,
) -> RowResult:
    """Enhance one row of the primary view, using the other view as evidence.

    The row is split into layer segments; each segment gets its own prior
    variance.  With ``cfg.relinearize == "iteration"`` the likelihood is
    re-linearized at every solver iterate (and ``cfg.outer_passes`` bounds
    the number of momentum restarts); with ``"pass"`` it is re-linearized
    once per outer pass and held fixed inside each solve.  The warp stays anchored at the pre-filtered row.
    Missing pixels are left untouched.
    """
    out = np.where(row.mask, row.xhat, row.y).astype(float)
    flags: set = set()
    cols = np.flatnonzero(row.mask)
    if cols.size < 2:
        flags.add("too_few_pixels")
        return RowResult(out, 0, math.nan, flags)
    warp = None
    if other is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OcclusionWarning)
            warp = linearize_warp(
                row.xhat[cols], focal, baseline, cfg.h, cfg.sigma_s, row.y.size, cols, direction,
                normalizer=cfg.warp_normalizer,
            )
        if caught:
            flags.add("occlusion")
    total_it = 0
    total_obj = 0.0
    labels = row.labels[cols]
    for z in np.unique(labels):
        local = np.flatnonzero(labels == z)
        seg = cols[local]
        if seg.size < 2:
            flags.add("short_segment")
            continue
        L_l = build_row_laplacian(seg, row.features[seg], M).laplacian
        H = e = L_r = yr = sr = None
        if warp is not None:
            J = _right_rows(warp, local, other, cfg, q)
            if J.size:
                H = warp.jacobian[J][:, local]
                e = warp.offset[J]
                L_r = build_row_laplacian(J, other.features[J], M).laplacian
                yr, sr = other.y[J], other.sigma[J]
        sp2 = sigma_p(row.layer_var[z], cfg.g1, cfg.g2)
        prior = assemble_prior(L_l, sp2, cfg.g1, cfg.g2, L_r, H, e)
        beta_prior = gct_step_bound(prior)
        x = row.xhat[seg].copy()
        if cfg.relinearize == "iteration":
            obj = RelinearizedObjective(row.y[seg], row.sigma[seg], q, prior, yr, sr, H, e)
            beta = beta_prior + obj.curvature_bound()
            for _ in range(cfg.outer_passes):
                # later passes restart the momentum from the previous result
                res = obj.solve(x, beta, cfg.eps, cfg.maxiter)
                flags |= res.flags
                total_it += res.iterations
                x = res.x
                if res.converged:
                    break
            total_obj += res.value
            out[seg] = x
            continue
        for _ in range(cfg.outer_passes):
            coeffs = likelihood_coeffs(row.y[seg], x, row.sigma[seg], q, yr, sr, H, e)
            flags |= coeffs.flags
            obj = MapObjective(coeffs, prior)
            beta = beta_prior
            g_log = obj.log_hessian_bound(x)
            if g_log > HESSIAN_RATIO_LIMIT * beta:
                # the log terms are not negligible here: add their disc bound
                flags.add("beta_inflated")
                beta += g_log
            if not beta > 0:
                flags.add("degenerate_segment")
                break
            res = obj.solve(x, beta, cfg.eps, cfg.maxiter)
            flags |= res.flags
            total_it += res.iterations
            x = res.x
        else:
            total_obj += res.value
        out[seg] = x
    return RowResult(out, total_it, total_obj, flags)
