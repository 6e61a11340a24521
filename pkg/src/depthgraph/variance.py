"""Noise standard-deviation estimation from quantized observations.

Each observation ``y`` of a known depth ``x*`` confines the noise sample to a
bin-shaped interval ``[n-, n+)``.  The per-cluster estimate maximizes the
product of interval probabilities over ``sigma``: single-observation maximizers
are found by Newton's method, they bracket the joint maximizer, and a
golden-section search finishes inside the bracket.  Two interval-probability
models are available:

``"approx"``
    the tail approximation of the Gaussian CDF,
    ``1 - Phi(t) ~ phi(t) t / (1 + t^2)``, written in terms of ``n`` and
    ``sigma``.  It degrades when the interval straddles zero; the factor turns
    negative there and its magnitude is used (flagged).
``"exact"``
    ``Phi(n+/sigma) - Phi(n-/sigma)`` evaluated in log space.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .forward import NoiseModel, QuantizerParams, noise_bounds

__all__ = [
    "ObservationCluster",
    "SigmaEstimate",
    "NoiseFit",
    "approx_gaussian_cdf",
    "unimodal_objective",
    "objective_derivative",
    "golden_section_max",
    "estimate_sigma_single",
    "estimate_sigma_cluster",
    "fit_noise_params",
    "read_clusters_csv",
    "ClusterParseError",
]

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

NEWTON_TOL = 1e-9
NEWTON_MAXITER = 50
GS_TOL = 1e-4  # mm
SIGMA_DOMAIN = (1e-3, 1e3)  # mm
PLATEAU_TOL = 1e-6  # log-objective units


@dataclass
class ObservationCluster:
    ground_truth: float
    samples: np.ndarray
    quantizer: QuantizerParams

    def __post_init__(self):
        self.samples = np.atleast_1d(np.asarray(self.samples, dtype=float))
        if self.samples.size < 1:
            raise ValueError("a cluster needs at least one observation")


@dataclass
class SigmaEstimate:
    sigma: float
    bracket_lo: float
    bracket_hi: float
    objective_value: float
    iterations: int
    method: str = "golden"
    flags: set = field(default_factory=set)


def approx_gaussian_cdf(x, sigma):
    """Tail approximation of the ``N(0, sigma^2)`` CDF, extended to ``x < 0`` by symmetry.

    Invalid near ``x = 0`` (it returns 1 there, the true value is 0.5).
    """
    if not np.all(np.asarray(sigma) > 0):
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    tail = INV_SQRT_2PI * a * sigma / (a * a + sigma * sigma) * np.exp(-a * a / (2.0 * sigma * sigma))
    out = np.where(x >= 0, 1.0 - tail, tail)
    return out if out.ndim else float(out)


def _tail_term(n, s):
    # n s / (n^2 + s^2) exp(-n^2 / 2 s^2), with its sigma-derivative
    e = np.exp(-n * n / (2.0 * s * s))
    d = n * n + s * s
    t = n * s / d * e
    dt = n * e * ((n * n - s * s) / (d * d) + n * n / (s * s * d))
    return t, dt


def _factors(s, n_lo, n_hi, kind):
    """Per-observation interval probability and its sigma-derivative."""
    if kind == "approx":
        t_lo, dt_lo = _tail_term(n_lo, s)
        t_hi, dt_hi = _tail_term(n_hi, s)
        return INV_SQRT_2PI * (t_lo - t_hi), INV_SQRT_2PI * (dt_lo - dt_hi)
    if kind == "exact":
        a, b = n_lo / s, n_hi / s
        # Phi(b) - Phi(a), computed on the far side of zero for accuracy
        flip = a > 0
        lo = np.where(flip, -b, a)
        hi = np.where(flip, -a, b)
        p = special.ndtr(hi) - special.ndtr(lo)
        dp = INV_SQRT_2PI * (a * np.exp(-a * a / 2.0) - b * np.exp(-b * b / 2.0)) / s
        return p, dp
    raise ValueError(f"unknown objective kind {kind!r}")


def _log_factors(s, n_lo, n_hi, kind):
    if kind == "exact":
        a, b = n_lo / s, n_hi / s
        flip = a > 0
        lo = np.where(flip, -b, a)
        hi = np.where(flip, -a, b)
        # log(Phi(hi) - Phi(lo)) = log Phi(hi) + log1p(-exp(logPhi(lo) - logPhi(hi)))
        lhi = special.log_ndtr(hi)
        llo = special.log_ndtr(lo)
        with np.errstate(divide="ignore"):
            return lhi + np.log1p(-np.exp(np.minimum(llo - lhi, 0.0)))
    f, _ = _factors(s, n_lo, n_hi, kind)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(f))


def unimodal_objective(sigma, cluster: ObservationCluster, kind: str = "approx"):
    """Log of the product objective over a cluster, ``(log_g, flags)``.

    ``flags`` contains ``"nonpositive_factor"`` when some factor of the
    approximate product is not positive; its magnitude is used in that case.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    n_lo, n_hi = noise_bounds(cluster.samples, cluster.ground_truth, cluster.quantizer)
    return _log_objective(sigma, n_lo, n_hi, kind)


def _log_objective(sigma, n_lo, n_hi, kind, weights=None):
    flags = set()
    if kind == "approx":
        f, _ = _factors(sigma, n_lo, n_hi, kind)
        if np.any(f <= 0):
            flags.add("nonpositive_factor")
    lf = _log_factors(sigma, n_lo, n_hi, kind)
    if weights is not None:
        lf = lf * weights
    return float(np.sum(lf)), flags


def objective_derivative(sigma, n_lo, n_hi, kind: str = "approx", weights=None) -> float:
    """``d/dsigma log g(sigma)``, i.e. ``g'(sigma) / g(sigma)``."""
    f, df = _factors(sigma, np.asarray(n_lo, float), np.asarray(n_hi, float), kind)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = df / f
    if weights is not None:
        r = r * weights
    return float(np.sum(r))


def golden_section_max(fun, lo, hi, tol=GS_TOL, maxiter=200):
    """Maximize a unimodal ``fun`` on ``[lo, hi]``; returns ``(x, f(x), iterations)``."""
    a, b = float(lo), float(hi)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    it = 0
    while b - a > tol and it < maxiter:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
        it += 1
    x = 0.5 * (a + b)
    return x, fun(x), it


def _plateau_point(logf, lo, hi, peak):
    """Geometric centre of the near-maximal region around ``peak``, or ``None`` if not flat."""
    f0 = logf(peak)
    if min(logf(max(peak / 2, lo)), logf(min(peak * 2, hi))) < f0 - PLATEAU_TOL:
        return None
    grid = np.geomspace(lo, hi, 400)
    vals = np.array([logf(s) for s in grid])
    top = max(vals.max(), logf(peak))
    flat = vals >= top - PLATEAU_TOL
    if flat.sum() < 8:
        return None
    # contiguous run containing the sample closest to the peak
    k = int(np.argmin(np.abs(np.log(grid) - math.log(peak))))
    if not flat[k]:
        k = int(np.flatnonzero(flat)[0])
    i = j = k
    while i > 0 and flat[i - 1]:
        i -= 1
    while j < grid.size - 1 and flat[j + 1]:
        j += 1
    if j - i + 1 < 8:
        return None
    return math.sqrt(grid[i] * grid[j])


def _newton_single(n_lo, n_hi, kind, s0):
    """Newton iteration on ``d log g / d sigma``; returns ``(sigma, iterations)`` or ``None``."""
    s = s0
    for it in range(1, NEWTON_MAXITER + 1):
        g1 = objective_derivative(s, n_lo, n_hi, kind)
        if not math.isfinite(g1):
            return None
        if abs(g1) < NEWTON_TOL:
            return s, it
        h = 1e-5 * s
        g2 = (objective_derivative(s + h, n_lo, n_hi, kind) - objective_derivative(s - h, n_lo, n_hi, kind)) / (2 * h)
        if not (math.isfinite(g2) and g2 < 0):
            return None
        step = -g1 / g2
        # damp to at most a factor-of-two change per step
        step = max(min(step, s), -0.5 * s)
        s = s + step
        if not SIGMA_DOMAIN[0] <= s <= SIGMA_DOMAIN[1]:
            return None
    return None


def estimate_sigma_single(y: float, x_star: float, q: QuantizerParams, kind: str = "exact") -> SigmaEstimate:
    """Maximizer of the one-observation objective.

    Newton's method is tried first; on divergence the maximizer comes from a
    golden-section search over ``SIGMA_DOMAIN``.  Flat objectives are resolved
    to the interior of the plateau and flagged ``"plateau"``.
    """
    n_lo, n_hi = noise_bounds(y, x_star, q)
    n_lo, n_hi = float(n_lo), float(n_hi)
    return _single_from_bounds(n_lo, n_hi, kind)


def _single_from_bounds(n_lo, n_hi, kind):
    lo, hi = SIGMA_DOMAIN

    def logf(s):
        return _log_objective(s, np.array([n_lo]), np.array([n_hi]), kind)[0]

    flags = set()
    if n_lo < 0 < n_hi:
        flags.add("straddle")
    s0 = max(abs(n_lo), abs(n_hi)) if n_lo < 0 < n_hi else min(abs(n_lo), abs(n_hi)) + 0.5 * (n_hi - n_lo)
    s0 = min(max(s0, 10 * lo), 0.1 * hi)
    res = _newton_single(n_lo, n_hi, kind, s0)
    if res is not None and logf(res[0]) >= max(logf(res[0] * 0.9), logf(res[0] * 1.1)):
        s, it = res
        method = "newton"
    else:
        # golden section in log-sigma: the objective spans decades
        u, _, it = golden_section_max(lambda v: logf(math.exp(v)), math.log(lo), math.log(hi), tol=1e-7)
        s = math.exp(u)
        method = "golden_fallback"
    p = _plateau_point(logf, lo, hi, s)
    if p is not None:
        flags.add("plateau")
        s = p
    return SigmaEstimate(s, s, s, logf(s), it, method, flags)


def estimate_sigma_cluster(cluster: ObservationCluster, kind: str = "exact", tol: float = GS_TOL) -> SigmaEstimate:
    """Joint maximizer over a cluster, searched between the single-observation maximizers."""
    if cluster.samples.size < 2:
        raise ValueError("estimate_sigma_cluster needs at least two observations")
    n_lo, n_hi = noise_bounds(cluster.samples, cluster.ground_truth, cluster.quantizer)
    # observations sharing a bin share a factor
    pairs, counts = np.unique(np.stack([n_lo, n_hi], axis=1), axis=0, return_counts=True)
    u_lo, u_hi, w = pairs[:, 0], pairs[:, 1], counts.astype(float)
    singles = [_single_from_bounds(a, b, kind) for a, b in zip(u_lo, u_hi)]
    s_all = np.array([e.sigma for e in singles])
    lo, hi = float(s_all.min()), float(s_all.max())

    def logf(s):
        return _log_objective(s, u_lo, u_hi, kind, w)[0]

    flags = set()
    if kind == "approx" and np.any((u_lo < 0) & (u_hi > 0)):
        flags.add("nonpositive_factor")
    if hi - lo <= tol:
        return SigmaEstimate(lo, lo, hi, logf(lo), 0, "degenerate", flags | {"degenerate_bracket"})

    # coarse scan: golden section assumes a single peak in the bracket
    grid = np.linspace(lo, hi, 65)
    vals = np.array([logf(s) for s in grid])
    interior = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    a, b = lo, hi
    if interior.sum() > 1:
        flags.add("multimodal")
        k = int(np.argmax(vals))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    s, fs, it = golden_section_max(logf, a, b, tol=tol)
    # the bracket ends themselves are candidates
    for edge in (lo, hi):
        fe = logf(edge)
        if fe > fs:
            s, fs = edge, fe
    if min(s - lo, hi - s) <= tol:
        flags.add("bracket_edge")
    return SigmaEstimate(s, lo, hi, fs, it, "golden", flags)


@dataclass
class NoiseFit:
    model: NoiseModel
    residuals: np.ndarray
    history: list
    flags: set = field(default_factory=set)

    @property
    def sse(self) -> float:
        return float(np.sum(self.residuals**2))


def _quad(p, x):
    alpha, mu, kappa = p
    return alpha * (x + mu) ** 2 + kappa


def fit_noise_params(x_star: Sequence[float], sigma: Sequence[float], maxiter: int = 500, tol: float = 1e-15) -> NoiseFit:
    """Least-squares fit of ``sigma = alpha (x + mu)^2 + kappa``.

    Levenberg-Marquardt with Marquardt scaling; the box ``alpha > 0``,
    ``kappa > 0``, ``mu < 0`` is enforced by projecting trial points.  Only
    steps that lower the residual are accepted, so ``history`` (sum of squared
    residuals per iteration) never increases.
    """
    x = np.asarray(x_star, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if x.size < 3 or np.unique(x).size < 3:
        raise ValueError("fit_noise_params needs at least 3 clusters with distinct depths")
    order = np.argsort(x)
    x, s = x[order], s[order]

    mu0 = -x.min()
    kappa0 = max(s.min(), 1e-6)
    # slope from the two extreme clusters with the vertex placed at mu0
    alpha0 = max((s[-1] - kappa0) / max((x[-1] + mu0) ** 2, 1e-12), 1e-12)
    p = np.array([alpha0, mu0, kappa0])
    floor = np.array([1e-300, -np.inf, 1e-300])
    ceil = np.array([np.inf, -1e-12, np.inf])

    def resid(p):
        return s - _quad(p, x)

    def jac(p):
        alpha, mu, _ = p
        return -np.stack([(x + mu) ** 2, 2 * alpha * (x + mu), np.ones_like(x)], axis=1)

    r = resid(p)
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    for _ in range(maxiter):
        J = jac(p)
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(60):
            D = np.diag(np.maximum(np.diag(A), 1e-300))
            try:
                step = np.linalg.solve(A + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = np.clip(p + step, floor, ceil)
            rt = resid(trial)
            ct = float(rt @ rt)
            if ct < cost:
                improved = True
                break
            lam *= 10
        if not improved:
            break
        rel = (cost - ct) / max(cost, 1e-300)
        p, r, cost = trial, rt, ct
        history.append(cost)
        lam = max(lam / 10, 1e-15)
        if rel < tol or cost == 0.0:
            break
    flags = set()
    if p[0] <= 1e-200:
        flags.add("alpha_at_bound")
    model = NoiseModel(alpha=float(p[0]), mu=float(p[1]), kappa=float(p[2]))
    return NoiseFit(model, r, history, flags)


class ClusterParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def read_clusters_csv(path, q: QuantizerParams) -> list[tuple[str, ObservationCluster]]:
    """Read ``cluster_id, x_star_mm, y_mm`` rows (header optional), grouped by id in first-seen order."""
    groups: dict[str, tuple[float, list]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()) or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "cluster_id":
                continue
            if len(row) != 3:
                raise ClusterParseError(lineno, f"expected 3 columns, got {len(row)}")
            cid = row[0].strip()
            try:
                xs, y = float(row[1]), float(row[2])
            except ValueError as exc:
                raise ClusterParseError(lineno, str(exc)) from None
            if not (math.isfinite(xs) and math.isfinite(y)):
                raise ClusterParseError(lineno, "non-finite value")
            if cid in groups and groups[cid][0] != xs:
                raise ClusterParseError(lineno, f"cluster {cid} has inconsistent x_star")
            groups.setdefault(cid, (xs, []))[1].append(y)
    return [(cid, ObservationCluster(xs, np.array(ys), q)) for cid, (xs, ys) in groups.items()]


def estimate_clusters(clusters: Iterable[ObservationCluster], kind: str = "exact") -> list[SigmaEstimate]:
    return [estimate_sigma_cluster(c, kind) for c in clusters]
