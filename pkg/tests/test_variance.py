import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from depthgraph.forward import DEFAULT_NOISE, DEFAULT_QUANTIZER, noise_bounds, noise_std, quantize_clamped, row_generator
from depthgraph.variance import (
    ClusterParseError,
    ObservationCluster,
    approx_gaussian_cdf,
    estimate_sigma_cluster,
    estimate_sigma_single,
    fit_noise_params,
    golden_section_max,
    objective_derivative,
    read_clusters_csv,
    unimodal_objective,
)

Q = DEFAULT_QUANTIZER


def planted_cluster(x_star, sigma, seed, size=100, row=0):
    n = row_generator(seed, row, 0).standard_normal(size) * sigma
    return ObservationCluster(x_star, quantize_clamped(x_star + n, Q), Q)


def test_approx_cdf_at_zero_is_out_of_validity():
    assert approx_gaussian_cdf(0.0, 2.0) == 1.0


def test_approx_cdf_three_sigma_against_quadrature():
    s = 2.5
    exact, _ = integrate.quad(lambda t: math.exp(-t * t / (2 * s * s)) / (math.sqrt(2 * math.pi) * s), -np.inf, 3 * s)
    assert abs(approx_gaussian_cdf(3 * s, s) - exact) < 0.01


@given(st.floats(0.01, 50), st.floats(0.1, 20))
def test_approx_cdf_symmetry(x, s):
    assert approx_gaussian_cdf(-x, s) + approx_gaussian_cdf(x, s) == pytest.approx(1.0, abs=1e-12)


def test_approx_cdf_rejects_bad_sigma():
    with pytest.raises(ValueError):
        approx_gaussian_cdf(1.0, 0.0)


def test_objective_of_two_is_sum_of_logs():
    c2 = ObservationCluster(1000.0, np.array([1002.65, 1004.6]), Q)
    a = unimodal_objective(3.0, ObservationCluster(1000.0, c2.samples[:1], Q))[0]
    b = unimodal_objective(3.0, ObservationCluster(1000.0, c2.samples[1:], Q))[0]
    assert unimodal_objective(3.0, c2)[0] == pytest.approx(a + b, rel=1e-13)


@given(st.floats(0.5, 5), st.floats(0.1, 10), st.floats(0.2, 3), st.floats(0.5, 20))
def test_objective_factor_scale_invariance(lo, width, c, s):
    from depthgraph.variance import _factors

    f1, _ = _factors(s, np.array([lo]), np.array([lo + width]), "approx")
    f2, _ = _factors(c * s, np.array([c * lo]), np.array([c * (lo + width)]), "approx")
    np.testing.assert_allclose(f1, f2, rtol=1e-10, atol=1e-300)


def test_objective_derivative_matches_finite_difference():
    lo, hi = np.array([2.0, -1.5]), np.array([3.0, 1.0])
    for kind in ("approx", "exact"):
        from depthgraph.variance import _log_objective

        f = lambda s: _log_objective(s, lo, hi, kind)[0]
        h = 1e-6
        fd = (f(2.0 + h) - f(2.0 - h)) / (2 * h)
        assert objective_derivative(2.0, lo, hi, kind) == pytest.approx(fd, rel=1e-6)


def test_straddling_bin_flags_nonpositive_factor():
    # the observed bin contains x*: the printed form has a non-positive factor
    c = ObservationCluster(1000.65, np.array([1000.65]), Q)
    _, flags = unimodal_objective(2.0, c, "approx")
    assert "nonpositive_factor" in flags


def _grid_argmax(f, lo, hi, n=10_000, rounds=3):
    """Dense grid scan, re-gridded around the best point each round."""
    for _ in range(rounds):
        grid = np.linspace(lo, hi, n)
        k = int(np.argmax([f(s) for s in grid]))
        step = grid[1] - grid[0]
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, n - 1)]
    return grid[k], step


def test_single_estimate_symmetric_bin_matches_grid():
    # x* at the bin centre: n- = -n+; the printed approximation has an interior peak
    from depthgraph.variance import _log_objective

    z_lo, z_hi = 999.65052844170863883, 1001.6526309337166112
    x_star = 0.5 * (z_lo + z_hi)
    est = estimate_sigma_single(1000.65, x_star, Q, kind="approx")
    lo, hi = noise_bounds(1000.65, x_star, Q)
    assert lo == pytest.approx(-hi, rel=1e-12)
    s_grid, _ = _grid_argmax(lambda s: _log_objective(s, np.array([lo]), np.array([hi]), "approx")[0], 0.05, 20)
    assert est.sigma == pytest.approx(s_grid, rel=1e-6)
    assert "straddle" in est.flags


def test_single_estimate_exact_symmetric_bin_is_plateau():
    # the exact bin probability only grows as sigma shrinks below the bin scale
    y = 1000.6510791621313
    est = estimate_sigma_single(y, y, Q, kind="exact")
    assert "plateau" in est.flags or est.sigma <= 1e-2


def test_single_estimate_off_bin_matches_grid_scan():
    y, x_star = 1000.6510791621313, 995.0
    est = estimate_sigma_single(y, x_star, Q)
    lo, hi = noise_bounds(y, x_star, Q)
    grid = np.linspace(0.5, 30, 10_000)
    with np.errstate(divide="ignore"):
        vals = np.log(norm.cdf(hi / grid) - norm.cdf(lo / grid))
    s_grid = grid[np.argmax(vals)]
    assert abs(est.sigma - s_grid) <= grid[1] - grid[0]
    assert est.method in ("newton", "golden_fallback")


def test_golden_section_on_parabola():
    x, fx, _ = golden_section_max(lambda v: -(v - 1.234) ** 2, 0, 5, tol=1e-9)
    assert x == pytest.approx(1.234, abs=1e-8)


@pytest.mark.parametrize("x_star", [615.0, 1015.0, 1525.0])
def test_cluster_estimate_within_bracket_and_grid(x_star):
    c = planted_cluster(x_star, noise_std(x_star, DEFAULT_NOISE), seed=4)
    est = estimate_sigma_cluster(c)
    assert est.bracket_lo <= est.sigma <= est.bracket_hi
    grid = np.linspace(est.bracket_lo, est.bracket_hi, 10_000)
    from depthgraph.variance import _log_objective

    lo, hi = noise_bounds(c.samples, x_star, Q)
    vals = [_log_objective(s, lo, hi, "exact")[0] for s in grid]
    assert abs(est.sigma - grid[int(np.argmax(vals))]) <= 2 * (grid[1] - grid[0])


def test_cluster_objective_unimodal_on_grid():
    c = planted_cluster(1015.0, 3.77, seed=2)
    lo, hi = noise_bounds(c.samples, c.ground_truth, Q)
    from depthgraph.variance import _log_objective

    vals = np.array([_log_objective(s, lo, hi, "exact")[0] for s in np.linspace(0.5, 30, 400)])
    interior = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    assert interior.sum() == 1


def test_cluster_planted_sigma_5mm():
    est = [estimate_sigma_cluster(planted_cluster(1000.0, 5.0, seed)).sigma for seed in range(20)]
    assert abs(np.median(est) / 5.0 - 1) < 0.15


def test_quantization_dominated_cluster_is_flagged():
    # far depth with sigma well below the bin width: one bin, degenerate bracket
    x = 4500.0
    c = ObservationCluster(x, np.full(50, quantize_clamped(x, Q)), Q)
    est = estimate_sigma_cluster(c)
    assert est.flags & {"degenerate_bracket", "bracket_edge"}


def test_cluster_needs_two_samples():
    with pytest.raises(ValueError):
        estimate_sigma_cluster(ObservationCluster(1000.0, [1000.65], Q))


def test_fit_exact_data():
    x = np.arange(615.0, 1526.0, 100.0)
    s = noise_std(x, DEFAULT_NOISE)
    fit = fit_noise_params(x, s)
    assert fit.model.alpha == pytest.approx(1e-5, rel=1e-6)
    assert fit.model.mu == pytest.approx(-528.0, rel=1e-6)
    assert fit.model.kappa == pytest.approx(1.4, rel=1e-6)
    assert all(b <= a for a, b in zip(fit.history, fit.history[1:]))


def test_fit_needs_three_depths():
    with pytest.raises(ValueError):
        fit_noise_params([600, 700], [1.5, 1.6])
    with pytest.raises(ValueError):
        fit_noise_params([600, 600, 700], [1.5, 1.6, 1.7])


@given(st.floats(2e-6, 5e-5), st.floats(-900, -100), st.floats(0.3, 5))
def test_fit_residuals_never_increase(alpha, mu, kappa):
    x = np.linspace(615, 1525, 8)
    s = alpha * (x + mu) ** 2 + kappa + np.sin(x) * 0.05
    fit = fit_noise_params(x, s)
    assert all(b <= a for a, b in zip(fit.history, fit.history[1:]))
    assert fit.model.alpha > 0 and fit.model.kappa > 0 and fit.model.mu < 0


def test_read_clusters_csv(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("cluster_id,x_star_mm,y_mm\na,1000,1000.65\na,1000,1002.65\nb,1500,1501.2\n")
    out = read_clusters_csv(p, Q)
    assert [cid for cid, _ in out] == ["a", "b"]
    assert out[0][1].samples.size == 2


@pytest.mark.parametrize(
    "body, line",
    [("a,1000,1000.65\na,1000\n", 2), ("a,1000,abc\n", 1), ("a,1000,1\na,1001,2\n", 2), ("a,nan,1\n", 1)],
)
def test_read_clusters_csv_errors_name_line(tmp_path, body, line):
    p = tmp_path / "c.csv"
    p.write_text(body)
    with pytest.raises(ClusterParseError, match=f"line {line}"):
        read_clusters_csv(p, Q)
