import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from depthgraph.enhance import _row
from depthgraph.forward import DEFAULT_QUANTIZER, NoiseModel, QuantizerParams, quantization_mapping
from depthgraph.solver import (
    MapObjective,
    RelinearizedObjective,
    SolverConfig,
    agd_solve,
    bin_coeffs,
    gct_step_bound,
    gd_solve,
    gershgorin_bound,
    gradient,
    linearize_gaussian,
    log_hessian_ratio,
    enhance_row,
    sigma_p,
)
from helpers import plane_views, power_iteration, row_fixture

Q = DEFAULT_QUANTIZER


def _density(n, s):
    return math.exp(-0.5 * (n / s) ** 2) / (math.sqrt(2 * math.pi) * s)


def test_linearize_gaussian_at_peak():
    a, b = linearize_gaussian(0.0, 2.0)
    assert a == 0.0 and b == pytest.approx(1 / (math.sqrt(2 * math.pi) * 2.0), rel=1e-15)


@given(st.floats(-30, 30), st.floats(0.1, 20))
def test_tangent_touches_density(n0, s):
    a, b = linearize_gaussian(n0, s)
    assert a * n0 + b == pytest.approx(_density(n0, s), rel=1e-12, abs=1e-300)
    if n0 != 0 and a != 0:
        assert np.sign(a) == -np.sign(n0)


def test_linearize_gaussian_rejects_sigma():
    with pytest.raises(ValueError):
        linearize_gaussian(0.0, 0.0)


def test_bin_closed_forms_match_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.normal(size=2)
        lo = rng.uniform(-10, 10)
        hi = lo + rng.uniform(0.01, 5)
        x = rng.uniform(-5, 5)
        at, bt = bin_coeffs(a, b, lo, hi)
        ref, _ = integrate.quad(lambda n: a * n + b, lo - x, hi - x, epsabs=0, epsrel=1e-10)
        assert at * x + bt == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_degenerate_bin():
    at, bt = bin_coeffs(0.3, 0.7, 5.0, 5.0)
    assert at == 0 and bt == 0


def _flatten_likelihood(obj):
    # uniform likelihood: every factor constant
    obj.c.a_tilde[:] = 0
    obj.c.b_tilde[:] = 1
    obj.c.a_bar[:] = 0
    obj.c.b_bar[:] = 1


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    obj, xt, _ = row_fixture(seed)
    assert math.isfinite(obj(xt))
    g = gradient(xt, obj.c, obj.p)
    fd = np.empty_like(xt)
    for i in range(xt.size):
        h = 1e-5
        d = np.zeros_like(xt)
        d[i] = h
        fd[i] = (obj(xt + d) - obj(xt - d)) / (2 * h)
    assert np.max(np.abs(g - fd)) <= 1e-5 * np.max(np.abs(g))


def test_prior_only_gradient():
    obj, xt, (y, sigma, prior, kw) = row_fixture(1)
    _flatten_likelihood(obj)
    g = obj.grad(xt)
    expect = 2 / prior.sigma_p_sq * (prior.laplacian_combined @ xt + prior.h_vec)
    np.testing.assert_allclose(g, expect, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gct_bound_dominatespower_iteration(seed):
    obj, _, (_, _, prior, _) = row_fixture(seed)
    L = prior.laplacian_combined
    assert gershgorin_bound(L) >= power_iteration(L) - 1e-9
    assert gct_step_bound(prior) == pytest.approx(2 / prior.sigma_p_sq * gershgorin_bound(L))


def test_gct_path_laplacian_and_diagonal():
    n = 50
    L = sp.diags([-np.ones(n - 1), np.r_[1, 2 * np.ones(n - 2), 1], -np.ones(n - 1)], [-1, 0, 1])
    assert gershgorin_bound(L) == 4.0
    assert np.linalg.eigvalsh(L.toarray())[-1] < 4.0
    d = np.array([3.0, 7.5, 1.0])
    assert gershgorin_bound(sp.diags(d)) == 7.5


def _quadratic(A, bvec):
    def fun(x):
        return 0.5 * x @ (A @ x) - bvec @ x, A @ x - bvec
    return fun


def test_agd_vs_gd_on_ill_conditioned_quadratic():
    # shifted path Laplacian with condition number 1e3, the structure of a row prior
    n = 64
    L = sp.diags([-np.ones(n - 1), np.r_[1, 2 * np.ones(n - 2), 1], -np.ones(n - 1)], [-1, 0, 1])
    lam = np.linalg.eigvalsh(L.toarray())[-1]
    A = (L + sp.eye(n) * lam / 999).tocsr()
    ev = np.linalg.eigvalsh(A.toarray())
    assert ev[-1] / ev[0] == pytest.approx(1e3)
    bvec = np.random.default_rng(0).normal(size=n)
    ref = spla.spsolve(A.tocsc(), bvec)
    beta = gershgorin_bound(A)
    a = agd_solve(_quadratic(A, bvec), np.zeros(n), beta, eps=1e-14, maxiter=200000)
    g = gd_solve(_quadratic(A, bvec), np.zeros(n), beta, eps=1e-14, maxiter=2000000)
    assert a.converged and g.converged
    assert np.linalg.norm(a.x - ref) <= 1e-6 * np.linalg.norm(ref)
    assert np.linalg.norm(a.x - g.x) <= 1e-6 * np.linalg.norm(g.x)
    assert a.iterations <= 0.5 * g.iterations


def test_gd_quadratic_part_decreases_monotonically():
    _, xt, (_, _, prior, _) = row_fixture(3)
    L, h = prior.laplacian_combined, prior.h_vec
    inv = 1 / prior.sigma_p_sq
    fun = lambda x: (inv * (x @ (L @ x) + 2 * h @ x), 2 * inv * (L @ x + h))
    beta = gct_step_bound(prior)
    x = xt.copy()
    prev = fun(x)[0]
    for _ in range(200):
        x = x - fun(x)[1] / beta
        cur = fun(x)[0]
        assert cur <= prev + 1e-9 * abs(prev)
        prev = cur


def test_prior_only_minimizer_matches_sparse_solve():
    obj, xt, (_, _, prior, _) = row_fixture(4)
    _flatten_likelihood(obj)
    L = prior.laplacian_combined + 1e-3 * sp.eye(xt.size)  # anchor the constant mode
    prior2 = type(prior)(prior.sigma_p_sq, prior.g1, prior.g2, sp.csr_matrix(L), prior.h_vec)
    obj2 = MapObjective(obj.c, prior2)
    ref = spla.spsolve(sp.csc_matrix(L), -prior.h_vec)
    res = agd_solve(obj2.value_and_grad, xt, gct_step_bound(prior2), eps=1e-20, maxiter=200000)
    assert np.linalg.norm(res.x - ref) <= 1e-6 * np.linalg.norm(ref)
    assert np.sum(obj2.grad(ref) ** 2) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_compiled_kernel_matches_python_agd(seed):
    obj, xt, (y, sigma, prior, kw) = row_fixture(seed)
    beta = gct_step_bound(prior) + obj.log_hessian_bound(xt)
    py = agd_solve(obj.value_and_grad, xt, beta, 1e-8, 300, domain=obj.in_domain)
    nb = obj.solve(xt, beta, 1e-8, 300)
    np.testing.assert_allclose(nb.x, py.x, rtol=1e-10)
    assert nb.iterations == py.iterations
    rel = RelinearizedObjective(y, sigma, Q, prior, kw["y_other"], kw["sigma_other"], kw["jacobian"], kw["offset"])
    beta = gct_step_bound(prior) + rel.curvature_bound()
    py = agd_solve(rel.value_and_grad, xt, beta, 1e-8, 300)
    nb = rel.solve(xt, beta, 1e-8, 300)
    np.testing.assert_allclose(nb.x, py.x, rtol=1e-10)
    assert nb.iterations == py.iterations


def test_objective_convex_on_domain():
    obj, xt, _ = row_fixture(5)
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(200):
        u = xt + rng.normal(0, 0.5, xt.size)
        v = xt + rng.normal(0, 0.5, xt.size)
        if not (obj.in_domain(u) and obj.in_domain(v)):
            continue
        lam = rng.uniform()
        w = lam * u + (1 - lam) * v
        assert obj(w) <= lam * obj(u) + (1 - lam) * obj(v) + 1e-9 * abs(obj(w))
        checked += 1
    assert checked > 20


def test_sigma_p_examples():
    assert sigma_p(123.0, 0.0, 1.0) == 1.0
    assert sigma_p(20.0, 1.0, 0.0) == pytest.approx(0.5 * sigma_p(10.0, 1.0, 0.0))
    assert sigma_p(5.0, 0.3, 0.1) > sigma_p(6.0, 0.3, 0.1)
    with pytest.raises(ValueError):
        sigma_p(1.0, 0.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(relinearize="never")
    with pytest.raises(ValueError):
        SolverConfig(h=0)


def test_zero_noise_limit_returns_input():
    q = QuantizerParams.from_phi(500.0, 200.0, 10.0, 5000.0, 1e5)
    m = NoiseModel(1e-12, -1.0, 1e-3)
    left, cl, pl, pr, cfg = plane_views(0, q=q, m=m)
    r = 2
    res = enhance_row(_row(pl, r), _row(pr, r), np.eye(6), q, 60.0, 40.0, cfg)
    step = q.bin_width(quantization_mapping(cl.values[r], q)).max()
    assert np.max(np.abs(res.x - cl.values[r])) <= step


def test_fronto_parallel_two_view_halves_mae():
    ratios = []
    for seed in range(20):
        left, cl, pl, pr, cfg = plane_views(seed)
        r = 1
        res = enhance_row(_row(pl, r), _row(pr, r), np.eye(6), Q, 60.0, 40.0, cfg)
        truth = left.values[r]
        ratios.append(np.mean(np.abs(res.x - truth)) / np.mean(np.abs(cl.values[r] - truth)))
    assert np.mean(ratios) <= 0.5


def test_too_few_pixels_flagged():
    left, cl, pl, pr, cfg = plane_views(0)
    row = _row(pl, 0)
    row.mask = np.zeros_like(row.mask)
    row.mask[5] = True
    res = enhance_row(row, None, np.eye(6), Q, 60.0, 40.0, cfg)
    assert "too_few_pixels" in res.flags
    np.testing.assert_array_equal(res.x[row.mask], row.xhat[row.mask])


def test_missing_pixels_untouched():
    left, cl, pl, pr, cfg = plane_views(1)
    row = _row(pl, 1)
    row.mask = row.mask.copy()
    row.mask[10:14] = False
    res = enhance_row(row, _row(pr, 1), np.eye(6), Q, 60.0, 40.0, cfg)
    np.testing.assert_array_equal(res.x[10:14], row.y[10:14])


def test_log_hessian_ratio_definition():
    obj, xt, (_, _, prior, _) = row_fixture(2)
    ratio = log_hessian_ratio(obj, xt)
    assert ratio == pytest.approx(gershgorin_bound(obj.log_hessian(xt)) / gct_step_bound(prior))
    # the O(nnz) bound dominates the exact disc bound
    assert obj.log_hessian_bound(xt) >= gershgorin_bound(obj.log_hessian(xt)) - 1e-12


def test_pass_mode_inflates_step_bound_when_log_terms_dominate():
    left, cl, pl, pr, _ = plane_views(2)
    cfg = SolverConfig(relinearize="pass", g1=0.0, g2=0.1)
    res = enhance_row(_row(pl, 1), _row(pr, 1), np.eye(6), Q, 60.0, 40.0, cfg)
    assert "beta_inflated" in res.flags
