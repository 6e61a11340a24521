"""Compiled inner loop of the row solver.

``agd_map`` mirrors :func:`depthgraph.solver.agd_solve` applied to a
:class:`depthgraph.solver.MapObjective`; ``agd_relin`` mirrors it applied to a
:class:`depthgraph.solver.RelinearizedObjective`. Both work on CSR arrays so a
row solve costs O(nnz) per iteration without interpreter overhead.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

FLAG_BACKTRACKED = 1
FLAG_MOMENTUM_RESET = 2
FLAG_MAXITER = 4


@njit(cache=True)
def _matvec(indptr, indices, data, x, out):
    for i in range(indptr.size - 1):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


@njit(cache=True)
def _in_domain(x, at, bt, ab, bb, Hp, Hi, Hd, hx):
    for i in range(x.size):
        if at[i] * x[i] + bt[i] <= 0.0:
            return False
    if ab.size:
        _matvec(Hp, Hi, Hd, x, hx)
        for j in range(ab.size):
            if ab[j] * hx[j] + bb[j] <= 0.0:
                return False
    return True


@njit(cache=True)
def _value_grad(x, at, bt, ab, bb, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp):
    """Objective value (``inf`` outside the domain) and gradient written into ``g``."""
    inside = True
    _matvec(Lp, Li, Ld, x, lx)
    val = 0.0
    quad = 0.0
    for i in range(x.size):
        f = at[i] * x[i] + bt[i]
        if f <= 0.0:
            inside = False
        if f < floor:
            f = floor
        val -= math.log(f)
        quad += x[i] * lx[i] + 2.0 * h[i] * x[i]
        g[i] = -at[i] / f + 2.0 * inv_sp * (lx[i] + h[i])
    if ab.size:
        _matvec(Hp, Hi, Hd, x, hx)
        for j in range(ab.size):
            f = ab[j] * hx[j] + bb[j]
            if f <= 0.0:
                inside = False
            if f < floor:
                f = floor
            val -= math.log(f)
            rr[j] = ab[j] / f
        _matvec(HTp, HTi, HTd, rr, tmp)
        for i in range(x.size):
            g[i] -= tmp[i]
    val += inv_sp * quad
    if not inside:
        val = math.inf
    return val


@njit(cache=True)
def agd_map(x0, at, bt, ab, bb, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, beta, eps, maxiter):
    n = x0.size
    m = ab.size
    g = np.empty(n)
    lx = np.empty(n)
    tmp = np.empty(n)
    hx = np.empty(m)
    rr = np.empty(m)
    x = x0.copy()
    c = x0.copy()
    flags = 0
    val = _value_grad(x, at, bt, ab, bb, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp)
    best_val = val
    best_x = x.copy()
    best_gn = 0.0
    for i in range(n):
        best_gn += g[i] * g[i]
    eta = 0.0
    eta_next = (1.0 + math.sqrt(1.0 + 4.0 * eta * eta)) / 2.0
    t = 1
    c_new = np.empty(n)
    x_new = np.empty(n)
    while True:
        gn = 0.0
        for i in range(n):
            gn += g[i] * g[i]
        if gn < eps:
            return x, val, gn, t - 1, True, flags
        if t > maxiter:
            break
        step = 1.0 / beta
        for i in range(n):
            c_new[i] = x[i] - step * g[i]
        while not _in_domain(c_new, at, bt, ab, bb, Hp, Hi, Hd, hx):
            flags |= FLAG_BACKTRACKED
            step *= 0.5
            if step * beta < 1e-30:
                for i in range(n):
                    c_new[i] = x[i]
                break
            for i in range(n):
                c_new[i] = x[i] - step * g[i]
        eta = eta_next
        eta_next = (1.0 + math.sqrt(1.0 + 4.0 * eta * eta)) / 2.0
        gamma = (1.0 - eta) / eta_next
        for i in range(n):
            x_new[i] = (1.0 - gamma) * c_new[i] + gamma * c[i]
        val = _value_grad(x_new, at, bt, ab, bb, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp)
        if not val < math.inf:
            flags |= FLAG_MOMENTUM_RESET
            for i in range(n):
                x_new[i] = c_new[i]
            val = _value_grad(x_new, at, bt, ab, bb, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp)
        for i in range(n):
            c[i] = c_new[i]
            x[i] = x_new[i]
        t += 1
        if val < best_val:
            best_val = val
            best_gn = 0.0
            for i in range(n):
                best_x[i] = x[i]
                best_gn += g[i] * g[i]
    flags |= FLAG_MAXITER
    return best_x, best_val, best_gn, maxiter, False, flags


INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _relin_factor(n0, s, z_lo, z_hi):
    """Slope in x and value of the tangent-line bin integral linearized at noise ``n0``.

    ``z_lo`` and ``z_hi`` are the bin edges in noise coordinates.
    """
    p = INV_SQRT_2PI / s * math.exp(-0.5 * (n0 / s) ** 2)
    a = -n0 / (s * s) * p
    b = p - a * n0
    w = z_hi - z_lo
    at = -a * w
    f = w * (a * 0.5 * (z_lo + z_hi) + b)
    return at, f


@njit(cache=True)
def _relin_value_grad(x, y, s, zl, zh, yr, sr, zrl, zrh, e, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp):
    _matvec(Lp, Li, Ld, x, lx)
    val = 0.0
    quad = 0.0
    for i in range(x.size):
        # bin edges are in depth; shift them into noise coordinates at x_i
        at, f = _relin_factor(y[i] - x[i], s[i], zl[i] - x[i], zh[i] - x[i])
        if f <= floor:
            at = 0.0
            f = floor
        val -= math.log(f)
        quad += x[i] * lx[i] + 2.0 * h[i] * x[i]
        g[i] = -at / f + 2.0 * inv_sp * (lx[i] + h[i])
    if yr.size:
        _matvec(Hp, Hi, Hd, x, hx)
        for j in range(yr.size):
            pred = hx[j] + e[j]
            ab, f = _relin_factor(yr[j] - pred, sr[j], zrl[j] - pred, zrh[j] - pred)
            if f <= floor:
                ab = 0.0
                f = floor
            val -= math.log(f)
            rr[j] = ab / f
        _matvec(HTp, HTi, HTd, rr, tmp)
        for i in range(x.size):
            g[i] -= tmp[i]
    return val + inv_sp * quad


@njit(cache=True)
def agd_relin(x0, y, s, zl, zh, yr, sr, zrl, zrh, e, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, beta, eps, maxiter):
    """AGD where every gradient is taken from a fresh linearization at the query point.

    Linearized factors are positive at their own linearization point, so
    no domain safeguard is needed.
    """
    n = x0.size
    m = yr.size
    g = np.empty(n)
    lx = np.empty(n)
    tmp = np.empty(n)
    hx = np.empty(m)
    rr = np.empty(m)
    x = x0.copy()
    c = x0.copy()
    val = _relin_value_grad(x, y, s, zl, zh, yr, sr, zrl, zrh, e, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp)
    best_val = val
    best_x = x.copy()
    best_gn = 0.0
    for i in range(n):
        best_gn += g[i] * g[i]
    eta = 0.0
    eta_next = (1.0 + math.sqrt(1.0 + 4.0 * eta * eta)) / 2.0
    t = 1
    c_new = np.empty(n)
    while True:
        gn = 0.0
        for i in range(n):
            gn += g[i] * g[i]
        if gn < eps:
            return x, val, gn, t - 1, True, 0
        if t > maxiter:
            break
        for i in range(n):
            c_new[i] = x[i] - g[i] / beta
        eta = eta_next
        eta_next = (1.0 + math.sqrt(1.0 + 4.0 * eta * eta)) / 2.0
        gamma = (1.0 - eta) / eta_next
        for i in range(n):
            x[i] = (1.0 - gamma) * c_new[i] + gamma * c[i]
            c[i] = c_new[i]
        t += 1
        val = _relin_value_grad(x, y, s, zl, zh, yr, sr, zrl, zrh, e, Hp, Hi, Hd, HTp, HTi, HTd, Lp, Li, Ld, h, inv_sp, floor, g, hx, lx, rr, tmp)
        if val < best_val:
            best_val = val
            best_gn = 0.0
            for i in range(n):
                best_x[i] = x[i]
                best_gn += g[i] * g[i]
    return best_x, best_val, best_gn, maxiter, False, FLAG_MAXITER
