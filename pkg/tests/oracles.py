"""Independent reference computations used to freeze expected test values.

These deliberately avoid the production code paths: the QP oracle is a dense
grid search refined by projected gradient descent (projections done by
Dykstra's alternating method over closed-form box/slab projections), the
one-dimensional oracle is a plain scalar grid refine, and the MLP oracle is a
straight-line matrix-multiply chain.
"""

from __future__ import annotations

import numpy as np


def project_box(y, lo, hi):
    return np.clip(y, lo, hi)


def project_slab(y, a, lo, hi):
    """Euclidean projection onto {y : lo <= a.y <= hi}."""
    v = a @ y
    nrm2 = a @ a
    if v > hi:
        return y - (v - hi) / nrm2 * a
    if v < lo:
        return y + (lo - v) / nrm2 * a
    return y


def dykstra_project(y0, box_lo, box_hi, gam, e_lo, e_hi, sweeps=2000, tol=1e-12):
    """Projection onto the box intersected with the cumulative-sum slabs.

    The exit test requires the iterate to be feasible as well as stationary;
    a sweep-movement test alone can stall while the correction terms are
    still redistributing between sets.
    """
    T = y0.size
    sets = [("box", None)]
    for t in range(T):
        if np.isfinite(e_lo[t]) or np.isfinite(e_hi[t]):
            sets.append(("slab", t))
    y = y0.copy()
    corr = [np.zeros(T) for _ in sets]
    for _ in range(sweeps):
        y_prev = y.copy()
        corr_drift = 0.0
        for i, (kind, t) in enumerate(sets):
            z = y + corr[i]
            if kind == "box":
                y_new = project_box(z, box_lo, box_hi)
            else:
                y_new = project_slab(z, gam[t], e_lo[t], e_hi[t])
            corr_drift += np.max(np.abs((z - y_new) - corr[i]))
            corr[i] = z - y_new
            y = y_new
        cs = gam @ y
        viol = max(np.max(y - box_hi, initial=0.0), np.max(box_lo - y, initial=0.0),
                   np.max(cs - e_hi, initial=0.0), np.max(e_lo - cs, initial=0.0))
        # the iterate can sit still while corrections keep redistributing, so
        # stationarity of the corrections is part of the exit test
        if viol < tol and np.max(np.abs(y - y_prev)) < tol and corr_drift < tol:
            break
    return y


def qp_oracle(lam, alpha_vec, p_lo, p_hi, e_lo, e_hi, grid_points=9,
              pgd_iters=4000, tol=1e-12):
    """Grid search refined by projected gradient descent on the box/energy QP.

    All bounds are full-length vectors; +/-inf marks an absent bound.  Returns
    the primal minimizer only; accuracy is limited by the projected-gradient
    tolerance, comfortably below 1e-5 on the scales used in tests.
    """
    lam = np.asarray(lam, float)
    a = np.asarray(alpha_vec, float)
    T = lam.size
    gam = np.tril(np.ones((T, T)))

    span = np.abs(lam / a) + 1.0
    lo = np.maximum(p_lo, -span)
    hi = np.minimum(p_hi, span)

    # coarse feasible start from a dense grid
    axes = [np.linspace(lo[t], hi[t], grid_points) for t in range(T)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, T)
    cs = mesh @ gam.T
    feas = np.all((cs <= e_hi + 1e-12) & (cs >= e_lo - 1e-12), axis=1)
    if feas.any():
        cand = mesh[feas]
        obj = cand @ lam + 0.5 * np.sum(a * cand ** 2, axis=1)
        y = cand[np.argmin(obj)].copy()
    else:
        y = dykstra_project(np.zeros(T), p_lo, p_hi, gam, e_lo, e_hi)

    step = 1.0 / a.max()
    for _ in range(pgd_iters):
        y_new = dykstra_project(y - step * (lam + a * y), p_lo, p_hi, gam, e_lo, e_hi)
        if np.max(np.abs(y_new - y)) < tol:
            y = y_new
            break
        y = y_new
    return y


def budget_oracle(lam, alpha, m_budget, pgd_iters=4000, tol=1e-13):
    """Projected gradient over the total-change slab |sum y| <= M."""
    lam = np.asarray(lam, float)
    T = lam.size
    ones = np.ones(T)
    y = np.zeros(T)
    step = 1.0 / alpha
    for _ in range(pgd_iters):
        y_new = project_slab(y - step * (lam + alpha * y), ones, -m_budget, m_budget)
        if np.max(np.abs(y_new - y)) < tol:
            y = y_new
            break
        y = y_new
    return y


def scalar_grid_min(fn, lo, hi, rounds=30, points=41):
    """Shrinking scalar grid search for one-dimensional objectives."""
    for _ in range(rounds):
        xs = np.linspace(lo, hi, points)
        vals = [fn(x) for x in xs]
        i = int(np.argmin(vals))
        lo = xs[max(i - 1, 0)]
        hi = xs[min(i + 1, points - 1)]
    return 0.5 * (lo + hi)


def asymmetric_oracle(lam, alpha1, alpha2, baseline, d_min):
    """Per-step scalar minimization of the split disutility objective."""
    lam = np.asarray(lam, float)
    d = np.asarray(baseline, float)
    out = np.zeros(lam.size)
    for t in range(lam.size):
        a1 = alpha1 / (d[t] - d_min)
        a2 = alpha2 / (d[t] - d_min)

        def f(y, t=t, a1=a1, a2=a2):
            return lam[t] * y + 0.5 * a1 * max(y, 0.0) ** 2 + 0.5 * a2 * max(-y, 0.0) ** 2

        span = abs(lam[t]) / min(a1, a2) + 1.0
        out[t] = scalar_grid_min(f, -span, span)
    return out


def mlp_chain(weights, biases, x, activation="relu"):
    """Straight-line reimplementation of the forward pass for cross-checking."""
    h = np.asarray(x, float)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1 and activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def central_difference(fn, x0, h=1e-6):
    """Elementwise central difference gradient of a scalar function."""
    x0 = np.asarray(x0, float)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        xp = flat.copy(); xp[i] += step
        xm = flat.copy(); xm[i] -= step
        gf[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * step)
    return g
