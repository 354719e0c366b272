"""Implicit differentiation of the agent optimum through its optimality system.

Totally differentiating the stationarity and complementarity conditions of the
box/budget model at an optimum gives a square linear system in the primal and
dual differentials.  With T steps the matrix is 5T x 5T, laid out in row
blocks (stationarity, upper box, lower box, upper cumulative, lower
cumulative):

    [ diag(a)        I            -I           Gamma'        -Gamma'      ]
    [ diag(mu_hi)    diag(y-ph)   0            0             0            ]
    [-diag(mu_lo)    0            diag(pl-y)   0             0            ]
    [ diag(nu_hi)G   0            0            diag(Gy-eh)   0            ]
    [-diag(nu_lo)G   0            0            0             diag(el-Gy)  ]

where Gamma is the lower-triangular cumulative-sum operator.  Solving against
one right-hand side per model coefficient yields the response Jacobians; a
single transposed solve yields all gradient (vector-Jacobian) products needed
during training.  Rows belonging to bounds at the unbounded sentinel are
replaced by identity rows with zero right-hand side, pinning their dual
differentials to zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .agent_qp import (
    DUAL_EPS,
    INF_BOUND,
    AgentModelKind,
    AgentParams,
    QPSolution,
    _as_price_vector,
    _broadcast_bound,
    build_constraints,
    complementarity_margin,
    gamma_matrix,
    is_bounded,
    resolve_alpha_vec,
    solve_agent_qp,
)
from .errors import ActiveSetFlip, DegenerateSystem, DimensionMismatch

COND_LIMIT = 1e12
REG_INITIAL = 1e-8
REG_MAX = 1e-4

# testable fault hooks: block coordinates of the assembled matrix that a
# gradient-check harness may sign-flip to prove it would catch a bad build
FAULT_BLOCKS = ("b12", "b14", "b21", "b41", "b44")


@dataclass
class KKTMatrix:
    """Assembled total-derivative system for one solved instance."""

    a: np.ndarray            # (5T, 5T)
    gamma: np.ndarray        # (T, T) lower-triangular ones
    regularization: float    # Tikhonov term actually applied (0 when clean)
    horizon: int
    kind: AgentModelKind
    bounded: dict            # family name -> bool mask of finite rows


@dataclass
class JacobianSet:
    """First-block rows of the parameter solves: dy/d(coefficient).

    Each field is a length-T vector.  ``dy_dm`` collapses the two cumulative
    bounds of the budget model (upper minus lower, both evaluated at the
    budget); it is None for other kinds.  ``full`` keeps all five stacked
    solutions (5T x 5) including the dual blocks.
    """

    dy_dalpha: np.ndarray
    dy_dp_hi: np.ndarray
    dy_dp_lo: np.ndarray
    dy_de_hi: np.ndarray
    dy_de_lo: np.ndarray
    dy_dm: np.ndarray | None = None
    full: np.ndarray | None = None


@dataclass
class AgentGradients:
    """Vector-Jacobian products of an upstream loss gradient with dy/dtheta."""

    g_alpha: float
    g_alpha_vec: np.ndarray
    g_p_lo: float
    g_p_hi: float
    g_e_lo: float
    g_e_hi: float
    g_m: float


def _snap(dual) -> np.ndarray:
    """Zero out solver-noise duals so inactive families differentiate to exactly zero."""
    d = np.asarray(dual, dtype=float)
    return np.where(np.abs(d) < DUAL_EPS, 0.0, d)


def _bound_masks(params: AgentParams, T: int):
    if params.kind is AgentModelKind.TOTAL_BUDGET:
        last = np.zeros(T, dtype=bool)
        last[-1] = True
        return {"p_hi": np.zeros(T, bool), "p_lo": np.zeros(T, bool),
                "e_hi": last.copy(), "e_lo": last.copy()}
    return {"p_hi": is_bounded(_broadcast_bound(params.p_high, T)),
            "p_lo": is_bounded(_broadcast_bound(params.p_low, T)),
            "e_hi": is_bounded(_broadcast_bound(params.e_high, T)),
            "e_lo": is_bounded(_broadcast_bound(params.e_low, T))}


def _bound_values(params: AgentParams, T: int):
    if params.kind is AgentModelKind.TOTAL_BUDGET:
        m = params.m_budget
        e_hi = np.full(T, INF_BOUND)
        e_lo = np.full(T, -INF_BOUND)
        e_hi[-1], e_lo[-1] = m, -m
        return (np.full(T, INF_BOUND), np.full(T, -INF_BOUND), e_hi, e_lo)
    return (_broadcast_bound(params.p_high, T), _broadcast_bound(params.p_low, T),
            _broadcast_bound(params.e_high, T), _broadcast_bound(params.e_low, T))


def build_kkt_system(sol: QPSolution, params: AgentParams, alpha_vec=None,
                     fault_block: str | None = None) -> KKTMatrix:
    """Assemble the 5T x 5T total-derivative matrix at a solved optimum.

    ``fault_block`` is a testing hook (one of ``FAULT_BLOCKS``) that flips the
    sign of a single block so downstream gradient checks can prove they detect
    a mis-assembled system.
    """
    y = np.asarray(sol.y, dtype=float)
    T = y.size
    a_vec = resolve_alpha_vec(params, T, alpha_vec)
    gam = gamma_matrix(T)
    p_hi, p_lo, e_hi, e_lo = _bound_values(params, T)
    masks = _bound_masks(params, T)

    n = 5 * T
    A = np.zeros((n, n))
    sl = [slice(i * T, (i + 1) * T) for i in range(5)]

    A[sl[0], sl[0]] = np.diag(a_vec)
    A[sl[0], sl[1]] = np.eye(T)
    A[sl[0], sl[2]] = -np.eye(T)
    A[sl[0], sl[3]] = gam.T
    A[sl[0], sl[4]] = -gam.T

    cum = gam @ y
    A[sl[1], sl[0]] = np.diag(_snap(sol.mu_hi))
    A[sl[1], sl[1]] = np.diag(y - p_hi)
    A[sl[2], sl[0]] = -np.diag(_snap(sol.mu_lo))
    A[sl[2], sl[2]] = np.diag(p_lo - y)
    A[sl[3], sl[0]] = np.diag(_snap(sol.nu_hi)) @ gam
    A[sl[3], sl[3]] = np.diag(cum - e_hi)
    A[sl[4], sl[0]] = -np.diag(_snap(sol.nu_lo)) @ gam
    A[sl[4], sl[4]] = np.diag(e_lo - cum)

    # sentinel-unbounded rows become identity rows (dual differential pinned to 0)
    for block, key in ((1, "p_hi"), (2, "p_lo"), (3, "e_hi"), (4, "e_lo")):
        for t in np.flatnonzero(~masks[key]):
            r = block * T + t
            A[r, :] = 0.0
            A[r, r] = 1.0

    if fault_block is not None:
        if fault_block not in FAULT_BLOCKS:
            raise ValueError(f"unknown fault block {fault_block!r}; choose from {FAULT_BLOCKS}")
        i, j = int(fault_block[1]) - 1, int(fault_block[2]) - 1
        A[sl[i], sl[j]] *= -1.0

    return KKTMatrix(a=A, gamma=gam, regularization=0.0, horizon=T,
                     kind=params.kind, bounded=masks)


def _rhs_matrix(sys: KKTMatrix, sol: QPSolution) -> np.ndarray:
    """Stack the five parameter right-hand sides as columns of a (5T, 5) matrix."""
    T = sys.horizon
    y = np.asarray(sol.y, dtype=float)
    rhs = np.zeros((5 * T, 5))
    rhs[0:T, 0] = y
    rhs[T:2 * T, 1] = -_snap(sol.mu_hi)
    rhs[2 * T:3 * T, 2] = _snap(sol.mu_lo)
    rhs[3 * T:4 * T, 3] = -_snap(sol.nu_hi)
    rhs[4 * T:5 * T, 4] = _snap(sol.nu_lo)
    return rhs


def _degenerate_indices(sys: KKTMatrix, tol: float = 1e-6):
    """Constraint rows where both the dual and the slack entries are near zero.

    Reads the assembled matrix: in constraint row r of block b, the (r, r)
    entry carries the (signed) slack and the (r, r - b*T) entry the dual.
    """
    T = sys.horizon
    keys = ["p_hi", "p_lo", "e_hi", "e_lo"]
    out = []
    for block in range(1, 5):
        for t in np.flatnonzero(sys.bounded[keys[block - 1]]):
            r = block * T + t
            # Gamma has a unit diagonal, so a[r, t] is the signed dual in every block
            if abs(sys.a[r, t]) < tol and abs(sys.a[r, r]) < tol:
                out.append(r)
    return out


def _factor(sys: KKTMatrix):
    """LU-factorize A with the escalating Tikhonov ladder.

    Returns (lu, piv, regularization).  A clean factorization leaves the
    matrix untouched so regularized and unregularized paths agree bitwise
    whenever no regularization is needed.
    """
    A = sys.a
    anorm = np.linalg.norm(A, 1)
    reg = 0.0
    while True:
        mat = A if reg == 0.0 else A + reg * np.eye(A.shape[0])
        ok = True
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu, piv = scipy.linalg.lu_factor(mat)
            rcond, info = scipy.linalg.lapack.dgecon(
                lu, anorm if reg == 0.0 else np.linalg.norm(mat, 1))
            if info != 0 or not np.isfinite(rcond) or rcond <= 0 or 1.0 / rcond > COND_LIMIT:
                ok = False
        except (scipy.linalg.LinAlgError, ValueError):
            ok = False
        if ok:
            sys.regularization = reg
            return lu, piv, reg
        reg = REG_INITIAL if reg == 0.0 else reg * 10.0
        if reg > REG_MAX:
            raise DegenerateSystem(
                "KKT total-derivative matrix is singular beyond the regularization "
                f"ladder (condition > {COND_LIMIT:.0e})",
                indices=_degenerate_indices(sys))


def solve_jacobians(sys: KKTMatrix, sol: QPSolution) -> JacobianSet:
    """Response Jacobians with respect to the five model coefficients.

    Solves A X = -R for the stacked right-hand sides and keeps the first T
    rows of each column.  For the budget model the two cumulative bounds
    collapse onto the single budget: dy/dM = dy/de_hi - dy/de_lo evaluated at
    e_hi = M, e_lo = -M.
    """
    lu, piv, _ = _factor(sys)
    T = sys.horizon
    rhs = _rhs_matrix(sys, sol)
    full = -scipy.linalg.lu_solve((lu, piv), rhs)
    out = JacobianSet(dy_dalpha=full[:T, 0].copy(), dy_dp_hi=full[:T, 1].copy(),
                      dy_dp_lo=full[:T, 2].copy(), dy_de_hi=full[:T, 3].copy(),
                      dy_de_lo=full[:T, 4].copy(), full=full)
    if sys.kind is AgentModelKind.TOTAL_BUDGET:
        out.dy_dm = out.dy_de_hi - out.dy_de_lo
    return out


def vjp_agent(sys: KKTMatrix, sol: QPSolution, upstream) -> AgentGradients:
    """All coefficient gradients from one transposed solve.

    ``upstream`` is the loss gradient with respect to the response.  Writing
    u~ = [upstream, 0, 0, 0, 0] and w = A^-T u~, each gradient is -w . r for
    the coefficient's right-hand side r, so a single solve replaces the five
    Jacobian solves.  Per-step curvature gradients (for chaining through a
    demand-dependent curvature) come from the elementwise product of the first
    block of w with the response.
    """
    T = sys.horizon
    u = np.asarray(upstream, dtype=float)
    if u.shape != (T,):
        raise DimensionMismatch(f"upstream has shape {u.shape}, expected ({T},)")
    lu, piv, _ = _factor(sys)
    ut = np.zeros(5 * T)
    ut[:T] = u
    w = scipy.linalg.lu_solve((lu, piv), ut, trans=1)
    y = np.asarray(sol.y, dtype=float)
    g_alpha_vec = -w[:T] * y
    g_p_hi = float(w[T:2 * T] @ _snap(sol.mu_hi))
    g_p_lo = float(-w[2 * T:3 * T] @ _snap(sol.mu_lo))
    g_e_hi = float(w[3 * T:4 * T] @ _snap(sol.nu_hi))
    g_e_lo = float(-w[4 * T:5 * T] @ _snap(sol.nu_lo))
    return AgentGradients(g_alpha=float(g_alpha_vec.sum()), g_alpha_vec=g_alpha_vec,
                          g_p_lo=g_p_lo, g_p_hi=g_p_hi, g_e_lo=g_e_lo, g_e_hi=g_e_hi,
                          g_m=g_e_hi - g_e_lo)


def vjp_agent_batch(a_stack: np.ndarray, y: np.ndarray, duals, upstream: np.ndarray,
                    kind: AgentModelKind):
    """Vectorized transpose-solve VJPs for a stack of assembled systems.

    a_stack: (N, 5T, 5T); y, upstream: (N, T); duals: (mu_hi, mu_lo, nu_hi,
    nu_lo) each (N, T).  Returns (gradients dict of (N,) arrays plus
    ``g_alpha_vec`` (N, T), bad) where ``bad`` flags instances whose solve
    failed the residual check and must be retried or skipped individually.
    """
    mu_hi, mu_lo, nu_hi, nu_lo = (_snap(v) for v in duals)
    N, n, _ = a_stack.shape
    T = y.shape[1]
    ut = np.zeros((N, n))
    ut[:, :T] = upstream
    at = np.swapaxes(a_stack, 1, 2)
    try:
        w = np.linalg.solve(at, ut[..., None])[..., 0]
    except np.linalg.LinAlgError:
        w = np.full((N, n), np.nan)
        for i in range(N):
            try:
                w[i] = np.linalg.solve(at[i], ut[i])
            except np.linalg.LinAlgError:
                pass
    resid = np.abs(np.einsum("nij,nj->ni", at, np.nan_to_num(w)) - ut).max(axis=1)
    bad = ~np.isfinite(w).all(axis=1) | (resid > 1e-6 * (1.0 + np.abs(ut).max(axis=1)))
    g_alpha_vec = -w[:, :T] * y
    g = {
        "alpha": np.einsum("nt->n", g_alpha_vec),
        "p_hi": np.einsum("nt,nt->n", w[:, T:2 * T], mu_hi),
        "p_lo": -np.einsum("nt,nt->n", w[:, 2 * T:3 * T], mu_lo),
        "e_hi": np.einsum("nt,nt->n", w[:, 3 * T:4 * T], nu_hi),
        "e_lo": -np.einsum("nt,nt->n", w[:, 4 * T:5 * T], nu_lo),
    }
    g["m"] = g["e_hi"] - g["e_lo"]
    g["alpha_vec"] = g_alpha_vec
    return g, bad


def build_kkt_batch(y, duals, params: AgentParams, alpha_vec) -> np.ndarray:
    """Assemble (N, 5T, 5T) total-derivative matrices for a batch of solutions.

    alpha_vec: (N, T).  Mirrors :func:`build_kkt_system` exactly, including the
    identity-row replacement for sentinel-unbounded constraints.
    """
    mu_hi, mu_lo, nu_hi, nu_lo = (_snap(v) for v in duals)
    N, T = y.shape
    gam = gamma_matrix(T)
    p_hi, p_lo, e_hi, e_lo = _bound_values(params, T)
    masks = _bound_masks(params, T)
    A = np.zeros((N, 5 * T, 5 * T))
    ii = np.arange(T)
    sl = [slice(i * T, (i + 1) * T) for i in range(5)]

    A[:, ii, ii] = alpha_vec
    A[:, sl[0], sl[1]] = np.eye(T)
    A[:, sl[0], sl[2]] = -np.eye(T)
    A[:, sl[0], sl[3]] = gam.T
    A[:, sl[0], sl[4]] = -gam.T

    cum = y @ gam.T
    A[:, T + ii, ii] = mu_hi
    A[:, T + ii, T + ii] = y - p_hi
    A[:, 2 * T + ii, ii] = -mu_lo
    A[:, 2 * T + ii, 2 * T + ii] = p_lo - y
    A[:, sl[3], sl[0]] = nu_hi[:, :, None] * gam[None, :, :]
    A[:, 3 * T + ii, 3 * T + ii] = cum - e_hi
    A[:, sl[4], sl[0]] = -nu_lo[:, :, None] * gam[None, :, :]
    A[:, 4 * T + ii, 4 * T + ii] = e_lo - cum

    for block, key in ((1, "p_hi"), (2, "p_lo"), (3, "e_hi"), (4, "e_lo")):
        for t in np.flatnonzero(~masks[key]):
            r = block * T + t
            A[:, r, :] = 0.0
            A[:, r, r] = 1.0
    return A


def finite_diff_jacobian(params: AgentParams, prices, alpha_vec=None,
                         h: float = 1e-5) -> JacobianSet:
    """Central-difference Jacobians of the forward solve (test oracle).

    Steps are scaled by max(1, |coefficient|).  Raises
    :class:`ActiveSetFlip` when the two probe solves disagree on which
    constraints are active, since the difference quotient then straddles a
    non-differentiable point.
    """
    lam = _as_price_vector(prices)
    T = lam.size
    base = solve_agent_qp(params, lam, alpha_vec)
    margin = complementarity_margin(base, params, lam)
    fields = {"dy_dalpha": None, "dy_dp_hi": None, "dy_dp_lo": None,
              "dy_de_hi": None, "dy_de_lo": None}
    zeros = np.zeros(T)

    def probe(name, value):
        step = h * max(1.0, abs(value))
        lo = solve_agent_qp(_with(params, name, value - step), lam, alpha_vec)
        hi = solve_agent_qp(_with(params, name, value + step), lam, alpha_vec)
        if not np.array_equal(_active_mask(lo, _with(params, name, value - step), lam),
                              _active_mask(hi, _with(params, name, value + step), lam)):
            raise ActiveSetFlip(
                f"active set changed while probing {name} (margin {margin:.2e})")
        return (hi.y - lo.y) / (2.0 * step)

    if params.kind is AgentModelKind.TOTAL_BUDGET:
        fields["dy_dalpha"] = probe("alpha", params.alpha)
        dy_dm = probe("m_budget", params.m_budget)
        out = JacobianSet(dy_dalpha=fields["dy_dalpha"], dy_dp_hi=zeros.copy(),
                          dy_dp_lo=zeros.copy(), dy_de_hi=zeros.copy(),
                          dy_de_lo=zeros.copy(), dy_dm=dy_dm)
        return out

    fields["dy_dalpha"] = probe("alpha", params.alpha)
    for name, attr in (("dy_dp_hi", "p_high"), ("dy_dp_lo", "p_low"),
                       ("dy_de_hi", "e_high"), ("dy_de_lo", "e_low")):
        value = getattr(params, attr)
        arr = np.asarray(value, dtype=float)
        if arr.ndim != 0:
            raise DimensionMismatch("finite differences support scalar bounds only")
        fields[name] = probe(attr, float(arr)) if is_bounded(arr) else zeros.copy()
    return JacobianSet(**fields)


def _with(params: AgentParams, name: str, value: float) -> AgentParams:
    kw = {"kind": params.kind, "alpha": params.alpha, "p_low": params.p_low,
          "p_high": params.p_high, "e_low": params.e_low, "e_high": params.e_high,
          "m_budget": params.m_budget, "alpha1": params.alpha1,
          "alpha2": params.alpha2, "d_min": params.d_min}
    kw[name] = value
    return AgentParams(**kw)


def _active_mask(sol: QPSolution, params: AgentParams, lam, tol: float = 1e-6):
    cons = build_constraints(params, lam.size)
    if cons.h.size == 0:
        return np.zeros(0, dtype=bool)
    slack = cons.h - cons.g @ sol.y
    return slack < tol
