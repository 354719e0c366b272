"""Demand response agent model: strictly convex QP forward solves with certified duals.

The agent picks a response ``y`` (kW, length T) against an incentive price
``lambda`` by minimizing

    sum_t lambda_t * y_t + 0.5 * a_t * y_t**2

subject to per-step box limits ``p_low <= y_t <= p_high`` and cumulative
limits ``e_low <= sum_{tau<=t} y_tau <= e_high``.  Three model kinds are
supported: the general box model, a total-change-budget reduction
(``|sum_t y_t| <= M``, no step limits), and a split-variable asymmetric
disutility model whose curvature is inversely proportional to the headroom
above a non-responsive demand floor.

Every solve returns primal and dual optima; duals feed the implicit
differentiation in :mod:`drid.kkt_backward`, so the solver iterates well
below the certified tolerance before returning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DimensionMismatch,
    GhostDemandViolation,
    InfeasibleModel,
    NoConvergence,
)

INF_BOUND = 1e9     # sentinel magnitude treated as an unbounded limit
ALPHA_MIN = 1e-3    # smallest admissible disutility curvature
TOL_KKT = 1e-6      # certified bound on every returned KKT residual
DUAL_EPS = 1e-8     # allowed negativity on returned duals
GHOST_GAP = 1e-3    # required clearance of baseline above the ghost demand

_MAX_ITER = 100
_STEP_SCALE = 0.99995


class AgentModelKind(Enum):
    GENERAL_BOX = "general_box"
    TOTAL_BUDGET = "total_budget"
    ASYMMETRIC_DISUTILITY = "asymmetric_disutility"


@dataclass(frozen=True)
class PriceSignal:
    """Time-of-use incentive price, one entry per step."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise DimensionMismatch("price signal must be a vector of length >= 1")
        if not np.all(np.isfinite(v)):
            raise InfeasibleModel("price signal contains non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class AgentParams:
    """Agent model coefficients; which fields apply depends on ``kind``.

    Box/energy bounds may be scalars or per-step vectors.  Magnitudes at or
    above ``INF_BOUND`` mark the bound as absent: the corresponding
    constraint row is dropped from the solve and its dual is pinned to zero.
    """

    kind: AgentModelKind
    alpha: float | None = None
    p_low: float | np.ndarray = -INF_BOUND
    p_high: float | np.ndarray = INF_BOUND
    e_low: float | np.ndarray = -INF_BOUND
    e_high: float | np.ndarray = INF_BOUND
    m_budget: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    d_min: float | None = None

    @classmethod
    def general_box(cls, alpha, p_low=-INF_BOUND, p_high=INF_BOUND,
                    e_low=-INF_BOUND, e_high=INF_BOUND):
        return cls(AgentModelKind.GENERAL_BOX, alpha=float(alpha),
                   p_low=p_low, p_high=p_high, e_low=e_low, e_high=e_high)

    @classmethod
    def total_budget(cls, alpha, m_budget):
        return cls(AgentModelKind.TOTAL_BUDGET, alpha=float(alpha),
                   m_budget=float(m_budget))

    @classmethod
    def asymmetric(cls, alpha1, alpha2, d_min):
        return cls(AgentModelKind.ASYMMETRIC_DISUTILITY, alpha1=float(alpha1),
                   alpha2=float(alpha2), d_min=float(d_min))

    def validate(self, horizon: int | None = None) -> None:
        """Raise :class:`InfeasibleModel` unless the invariants hold.

        The zero response must be admissible: bounds that exclude 0 are
        rejected rather than shifted.
        """
        if self.kind is AgentModelKind.ASYMMETRIC_DISUTILITY:
            if self.alpha1 is None or self.alpha2 is None or self.d_min is None:
                raise InfeasibleModel("asymmetric model needs alpha1, alpha2, d_min")
            if self.alpha1 < ALPHA_MIN or self.alpha2 < ALPHA_MIN:
                raise InfeasibleModel(
                    f"alpha1/alpha2 must be >= {ALPHA_MIN}; "
                    f"got {self.alpha1}, {self.alpha2}")
            return
        if self.alpha is None or not np.isfinite(self.alpha) or self.alpha < ALPHA_MIN:
            raise InfeasibleModel(f"alpha must be finite and >= {ALPHA_MIN}; got {self.alpha}")
        if self.kind is AgentModelKind.TOTAL_BUDGET:
            if self.m_budget is None or not np.isfinite(self.m_budget) or self.m_budget < 0:
                raise InfeasibleModel(f"m_budget must be finite and >= 0; got {self.m_budget}")
            return
        p_lo, p_hi = np.asarray(self.p_low, float), np.asarray(self.p_high, float)
        e_lo, e_hi = np.asarray(self.e_low, float), np.asarray(self.e_high, float)
        for name, arr in (("p_low", p_lo), ("p_high", p_hi), ("e_low", e_lo), ("e_high", e_hi)):
            if horizon is not None and arr.ndim == 1 and arr.size != horizon:
                raise DimensionMismatch(f"{name} has length {arr.size}, expected {horizon}")
            if np.any(np.isnan(arr)):
                raise InfeasibleModel(f"{name} contains NaN")
        if np.any(p_lo > 0) or np.any(p_hi < 0) or np.any(p_lo > p_hi):
            raise InfeasibleModel("power bounds must satisfy p_low <= 0 <= p_high")
        if np.any(e_lo > 0) or np.any(e_hi < 0) or np.any(e_lo > e_hi):
            raise InfeasibleModel("energy bounds must satisfy e_low <= 0 <= e_high")


@dataclass
class QPSolution:
    """Primal optimum plus the four dual families of the box/energy model.

    For the asymmetric model, ``mu_hi``/``mu_lo`` hold the multipliers of the
    nonnegativity constraints on the increase/decrease split variables, the
    ``nu`` families are zero, and the per-step effective curvatures of the two
    sides are exposed in ``curvature_pos``/``curvature_neg``.
    """

    y: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    objective_value: float
    kkt_residual: float
    curvature_pos: np.ndarray | None = None
    curvature_neg: np.ndarray | None = None


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def gamma_matrix(horizon: int) -> np.ndarray:
    """Lower-triangular all-ones matrix turning responses into cumulative sums."""
    return np.tril(np.ones((horizon, horizon)))


def is_bounded(value) -> np.ndarray:
    """True where a bound magnitude is below the unbounded sentinel."""
    return np.abs(np.asarray(value, dtype=float)) < INF_BOUND


def _as_price_vector(prices) -> np.ndarray:
    if isinstance(prices, PriceSignal):
        return prices.values
    return PriceSignal(np.asarray(prices, dtype=float)).values


def _broadcast_bound(value, horizon: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(horizon, float(arr))
    if arr.shape != (horizon,):
        raise DimensionMismatch(f"bound has shape {arr.shape}, expected ({horizon},)")
    return arr.copy()


@dataclass(frozen=True)
class _ConstraintSet:
    """Finite rows of G y <= h plus bookkeeping to scatter duals back.

    ``family`` codes: 0 = mu_hi (y <= p_high), 1 = mu_lo (-y <= -p_low),
    2 = nu_hi (cumsum <= e_high), 3 = nu_lo (-cumsum <= -e_low).
    """

    g: np.ndarray
    h: np.ndarray
    family: np.ndarray
    index: np.ndarray
    horizon: int


def build_constraints(params: AgentParams, horizon: int) -> _ConstraintSet:
    """Assemble the finite constraint rows for a box/budget model."""
    T = horizon
    if params.kind is AgentModelKind.TOTAL_BUDGET:
        p_lo = np.full(T, -INF_BOUND)
        p_hi = np.full(T, INF_BOUND)
        e_lo = np.full(T, -INF_BOUND)
        e_hi = np.full(T, INF_BOUND)
        e_lo[-1] = -params.m_budget
        e_hi[-1] = params.m_budget
    elif params.kind is AgentModelKind.GENERAL_BOX:
        p_lo = _broadcast_bound(params.p_low, T)
        p_hi = _broadcast_bound(params.p_high, T)
        e_lo = _broadcast_bound(params.e_low, T)
        e_hi = _broadcast_bound(params.e_high, T)
    else:
        raise InfeasibleModel("asymmetric model has no box constraint set; use solve_asymmetric")

    gam = gamma_matrix(T)
    eye = np.eye(T)
    rows, rhs, fam, idx = [], [], [], []
    for code, (mat, bound, sign) in enumerate([
            (eye, p_hi, 1.0), (eye, p_lo, -1.0), (gam, e_hi, 1.0), (gam, e_lo, -1.0)]):
        for t in np.flatnonzero(is_bounded(bound)):
            rows.append(sign * mat[t])
            rhs.append(sign * bound[t])
            fam.append(code)
            idx.append(t)
    g = np.array(rows, dtype=float).reshape(len(rows), T)
    return _ConstraintSet(g=g, h=np.array(rhs, dtype=float),
                          family=np.array(fam, dtype=int),
                          index=np.array(idx, dtype=int), horizon=T)


def expand_total_budget(params: AgentParams, horizon: int) -> AgentParams:
    """Rewrite a total-budget model as a general box model with vector bounds.

    Only the final cumulative step carries the budget; intermediate cumulative
    bounds and all step bounds are left at the unbounded sentinel.
    """
    if params.kind is not AgentModelKind.TOTAL_BUDGET:
        raise InfeasibleModel("expand_total_budget expects a total-budget model")
    e_lo = np.full(horizon, -INF_BOUND)
    e_hi = np.full(horizon, INF_BOUND)
    e_lo[-1] = -params.m_budget
    e_hi[-1] = params.m_budget
    return AgentParams(AgentModelKind.GENERAL_BOX, alpha=params.alpha,
                       e_low=e_lo, e_high=e_hi)


def _solve_diag_qp(q, c, g, h, max_iter=_MAX_ITER):
    """Minimize 0.5 u' diag(q) u + c'u  s.t.  g u <= h, batched over axis 0.

    q, c: (N, n) with q > 0; g: (k, n); h: (k,).  Mehrotra-style
    predictor-corrector with an infeasible start; each instance follows its own
    trajectory and freezes once its unscaled KKT residual drops below the
    internal target, so results do not depend on what else is in the batch.

    Returns (u, w, resid): primal (N, n), duals (N, k), residuals (N,).
    """
    q = np.asarray(q, float)
    c = np.asarray(c, float)
    N, n = c.shape
    k = g.shape[0]
    if k == 0:
        u = -c / q
        return u, np.zeros((N, 0)), np.zeros(N)

    scale = np.maximum(1.0, np.abs(c).max(axis=1))
    t_opt = 1e-11 * scale
    t_comp = np.maximum(1e-12, 1e-14 * scale)

    u = np.zeros((N, n))
    s = np.tile(np.maximum(h, 1.0), (N, 1))
    w = np.ones((N, k))
    resid = np.full(N, np.inf)
    live = np.arange(N)

    for _ in range(max_iter):
        uu, ss, ww = u[live], s[live], w[live]
        gu = uu @ g.T
        r_d = q[live] * uu + c[live] + ww @ g
        r_p = gu + ss - h
        comp = ww * ss
        opt = np.maximum(np.abs(r_d).max(axis=1),
                         np.maximum((gu - h).max(axis=1), 0.0))
        resid[live] = np.maximum(opt, comp.max(axis=1))

        # a constraint is settled once its product is tiny or one side is
        # pinned at zero; demanding tiny products on both sides drives the
        # scaling matrix into overflow before the lagging side catches up
        settled = (comp <= t_comp[live][:, None]) | (np.minimum(ww, ss) <= 1e-9)
        still = (opt > t_opt[live]) | ~settled.all(axis=1)
        if not still.any():
            break
        if not still.all():
            live = live[still]
            uu, ss, ww = u[live], s[live], w[live]
            r_d, r_p, comp = r_d[still], r_p[still], comp[still]

        mu = comp.mean(axis=1)
        d = np.minimum(ww / ss, 1e13)  # cap keeps the normal matrix factorizable
        mmat = np.einsum("ki,mk,kj->mij", g, d, g)
        ii = np.arange(n)
        mmat[:, ii, ii] += q[live]

        try:
            # predictor (affine scaling) direction
            rw_aff = -ww + d * r_p
            du_aff = np.linalg.solve(mmat, -(r_d + rw_aff @ g)[..., None])[..., 0]
            ds_aff = -r_p - du_aff @ g.T
            dw_aff = rw_aff + d * (du_aff @ g.T)
            a_aff = np.minimum(_max_step(ss, ds_aff, ww, dw_aff), 1.0)
            mu_aff = ((ww + a_aff[:, None] * dw_aff)
                      * (ss + a_aff[:, None] * ds_aff)).mean(axis=1)
            sigma = np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0) ** 3

            # corrector with centering
            tau = sigma * mu
            rw = -ww + (tau[:, None] - dw_aff * ds_aff) / ss + d * r_p
            du = np.linalg.solve(mmat, -(r_d + rw @ g)[..., None])[..., 0]
            ds = -r_p - du @ g.T
            dw = rw + d * (du @ g.T)
        except np.linalg.LinAlgError:
            break  # freeze every live instance at its last iterate
        a = np.minimum(_STEP_SCALE * _max_step(ss, ds, ww, dw), 1.0)

        u_new = uu + a[:, None] * du
        s_new = ss + a[:, None] * ds
        w_new = ww + a[:, None] * dw
        # freeze any instance whose step went numerically bad at its last good iterate
        fin = (np.isfinite(u_new).all(axis=1) & np.isfinite(s_new).all(axis=1)
               & np.isfinite(w_new).all(axis=1) & (s_new > 0).all(axis=1)
               & (w_new > 0).all(axis=1))
        if not fin.all():
            keep = live[fin]
            u[keep], s[keep], w[keep] = u_new[fin], s_new[fin], w_new[fin]
            live = keep
            if live.size == 0:
                break
        else:
            u[live], s[live], w[live] = u_new, s_new, w_new

    return u, w, resid


def _max_step(s, ds, w, dw):
    """Largest step in (0, 1] keeping s and w strictly positive."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_s = np.where(ds < 0, -s / ds, np.inf)
        ratio_w = np.where(dw < 0, -w / dw, np.inf)
    return np.minimum(1.0 / _STEP_SCALE,
                      np.minimum(ratio_s.min(axis=1), ratio_w.min(axis=1)))


def _scatter_duals(cons: _ConstraintSet, w: np.ndarray):
    """Map packed constraint duals (N, k) into the four (N, T) families."""
    N = w.shape[0]
    T = cons.horizon
    fams = [np.zeros((N, T)) for _ in range(4)]
    for j in range(cons.h.size):
        fams[cons.family[j]][:, cons.index[j]] = w[:, j]
    return fams  # mu_hi, mu_lo, nu_hi, nu_lo


def resolve_alpha_vec(params: AgentParams, horizon: int, alpha_vec=None) -> np.ndarray:
    """Per-step curvature vector: explicit override or the constant model alpha."""
    if alpha_vec is None:
        if params.alpha is None:
            raise InfeasibleModel("model carries no constant alpha; pass alpha_vec")
        return np.full(horizon, float(params.alpha))
    a = np.asarray(alpha_vec, dtype=float)
    if a.shape != (horizon,):
        raise DimensionMismatch(f"alpha_vec has shape {a.shape}, expected ({horizon},)")
    if np.any(~np.isfinite(a)) or np.any(a < ALPHA_MIN):
        raise InfeasibleModel(f"alpha_vec entries must be finite and >= {ALPHA_MIN}")
    return a


def solve_agent_qp_batch(params: AgentParams, lam: np.ndarray, alpha_vec=None):
    """Forward-solve one box/budget model against a batch of price days.

    lam: (N, T); alpha_vec: None, (T,), or (N, T).
    Returns (y, mu_hi, mu_lo, nu_hi, nu_lo, resid) with leading batch axis.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 2:
        raise DimensionMismatch("batch prices must be (N, T)")
    N, T = lam.shape
    params.validate(T)
    if alpha_vec is None or np.asarray(alpha_vec).ndim <= 1:
        a_row = resolve_alpha_vec(params, T, alpha_vec)
        a = np.tile(a_row, (N, 1))
    else:
        a = np.asarray(alpha_vec, dtype=float)
        if a.shape != (N, T):
            raise DimensionMismatch(f"alpha_vec has shape {a.shape}, expected ({N}, {T})")
        if np.any(~np.isfinite(a)) or np.any(a < ALPHA_MIN):
            raise InfeasibleModel(f"alpha_vec entries must be finite and >= {ALPHA_MIN}")
    cons = build_constraints(params, T)
    u, w, resid = _solve_diag_qp(a, lam, cons.g, cons.h)
    if np.any(resid > TOL_KKT):
        worst = float(resid.max())
        raise NoConvergence(
            f"interior point hit the iteration cap at residual {worst:.3e}", worst)
    mu_hi, mu_lo, nu_hi, nu_lo = _scatter_duals(cons, w)
    return u, mu_hi, mu_lo, nu_hi, nu_lo, resid


def solve_agent_qp(params: AgentParams, prices, alpha_vec=None) -> QPSolution:
    """Solve the agent problem for one price day, returning primal and duals.

    The objective is strictly convex, so the minimizer is unique and the solve
    is deterministic for fixed inputs.  Raises :class:`InfeasibleModel` when
    the parameters exclude the zero response and :class:`NoConvergence` when
    the iteration cap is hit above ``TOL_KKT``.
    """
    lam = _as_price_vector(prices)
    T = lam.size
    if params.kind is AgentModelKind.ASYMMETRIC_DISUTILITY:
        raise InfeasibleModel("use solve_asymmetric for the asymmetric model")
    y, mu_hi, mu_lo, nu_hi, nu_lo, _ = solve_agent_qp_batch(params, lam[None], alpha_vec)
    a = resolve_alpha_vec(params, T, alpha_vec)
    sol = QPSolution(y=y[0], mu_hi=mu_hi[0], mu_lo=mu_lo[0],
                     nu_hi=nu_hi[0], nu_lo=nu_lo[0],
                     objective_value=float(agent_objective(y[0], lam, a)),
                     kkt_residual=0.0)
    sol.kkt_residual = kkt_residuals(sol, params, lam, a).max
    return sol


def solve_asymmetric(params: AgentParams, prices, baseline) -> QPSolution:
    """Solve the asymmetric-disutility model by splitting y into y+ - y-.

    The split problem is a plain nonnegativity-constrained QP; with strictly
    positive curvature and a linear price at most one side is nonzero per
    step, so the split complementarity holds without being enforced.
    """
    if params.kind is not AgentModelKind.ASYMMETRIC_DISUTILITY:
        raise InfeasibleModel("solve_asymmetric expects an asymmetric-disutility model")
    params.validate()
    lam = _as_price_vector(prices)
    d = np.asarray(baseline, dtype=float)
    if d.shape != lam.shape:
        raise DimensionMismatch(f"baseline has shape {d.shape}, expected {lam.shape}")
    head = d - params.d_min
    if np.any(head <= GHOST_GAP):
        bad = np.flatnonzero(head <= GHOST_GAP)
        raise GhostDemandViolation(
            f"baseline must exceed d_min + {GHOST_GAP} at every step; "
            f"violated at t={bad.tolist()}")
    T = lam.size
    a_pos = params.alpha1 / head
    a_neg = params.alpha2 / head
    q = np.concatenate([a_pos, a_neg])
    c = np.concatenate([lam, -lam])
    g = -np.eye(2 * T)
    h = np.zeros(2 * T)
    u, w, resid = _solve_diag_qp(q[None], c[None], g, h)
    if resid[0] > TOL_KKT:
        raise NoConvergence(
            f"interior point hit the iteration cap at residual {resid[0]:.3e}",
            float(resid[0]))
    y = u[0, :T] - u[0, T:]
    obj = float(agent_objective(y, lam, None, baseline=d, params=params))
    sol = QPSolution(y=y, mu_hi=w[0, :T].copy(), mu_lo=w[0, T:].copy(),
                     nu_hi=np.zeros(T), nu_lo=np.zeros(T),
                     objective_value=obj, kkt_residual=float(resid[0]),
                     curvature_pos=a_pos, curvature_neg=a_neg)
    return sol


def kkt_residuals(sol: QPSolution, params: AgentParams, prices, alpha_vec) -> KKTResiduals:
    """Evaluate the first-order optimality residuals of a candidate solution.

    Stationarity uses the transposed cumulative-sum operator for the energy
    duals; complementarity is the largest absolute dual-times-slack product
    over the four constraint families.  Rows at the unbounded sentinel carry
    zero duals and are excluded.
    """
    lam = _as_price_vector(prices)
    T = lam.size
    y = np.asarray(sol.y, dtype=float)
    if y.shape != (T,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({T},)")
    for name, v in (("mu_lo", sol.mu_lo), ("mu_hi", sol.mu_hi),
                    ("nu_lo", sol.nu_lo), ("nu_hi", sol.nu_hi)):
        if np.asarray(v).shape != (T,):
            raise DimensionMismatch(f"{name} has shape {np.asarray(v).shape}, expected ({T},)")

    if params.kind is AgentModelKind.ASYMMETRIC_DISUTILITY:
        return _split_residuals(sol, params, lam)

    a = resolve_alpha_vec(params, T, alpha_vec)
    cons = build_constraints(params, T)
    gam = cons.g  # finite rows only
    slack = cons.h - gam @ y
    w = np.empty(cons.h.size)
    fam_vec = [sol.mu_hi, sol.mu_lo, sol.nu_hi, sol.nu_lo]
    for j in range(cons.h.size):
        w[j] = fam_vec[cons.family[j]][cons.index[j]]
    stat = lam + a * y + gam.T @ w if cons.h.size else lam + a * y
    primal = float(max(np.max(-slack, initial=0.0), 0.0))
    dual = float(max(np.max(-w, initial=0.0), 0.0))
    comp = float(np.max(np.abs(w * slack), initial=0.0))
    return KKTResiduals(stationarity=float(np.abs(stat).max()),
                        primal=primal, dual=dual, complementarity=comp)


def _split_residuals(sol: QPSolution, params: AgentParams, lam: np.ndarray) -> KKTResiduals:
    y = sol.y
    y_pos = np.maximum(y, 0.0)
    y_neg = np.maximum(-y, 0.0)
    a_pos, a_neg = sol.curvature_pos, sol.curvature_neg
    stat_pos = lam + a_pos * y_pos - sol.mu_hi
    stat_neg = -lam + a_neg * y_neg - sol.mu_lo
    stat = float(max(np.abs(stat_pos).max(), np.abs(stat_neg).max()))
    primal = 0.0  # split variables are nonnegative by construction of y+/y-
    dual = float(max(np.max(-sol.mu_hi, initial=0.0), np.max(-sol.mu_lo, initial=0.0), 0.0))
    comp = float(max(np.abs(sol.mu_hi * y_pos).max(), np.abs(sol.mu_lo * y_neg).max()))
    return KKTResiduals(stat, primal, dual, comp)


def agent_objective(y, prices, alpha_vec=None, baseline=None, params=None) -> float:
    """Agent cost of a response: price term plus quadratic discomfort.

    With an asymmetric ``params`` and a ``baseline``, evaluates the split form
    with side-specific curvature; otherwise ``sum lam*y + 0.5*a*y**2``.
    """
    lam = _as_price_vector(prices)
    y = np.asarray(y, dtype=float)
    if y.shape != lam.shape:
        raise DimensionMismatch(f"y has shape {y.shape}, expected {lam.shape}")
    if (params is not None and params.kind is AgentModelKind.ASYMMETRIC_DISUTILITY
            and baseline is not None):
        d = np.asarray(baseline, dtype=float)
        if d.shape != lam.shape:
            raise DimensionMismatch(f"baseline has shape {d.shape}, expected {lam.shape}")
        head = d - params.d_min
        y_pos = np.maximum(y, 0.0)
        y_neg = np.maximum(-y, 0.0)
        return float(lam @ y + 0.5 * np.sum(params.alpha1 / head * y_pos ** 2)
                     + 0.5 * np.sum(params.alpha2 / head * y_neg ** 2))
    if alpha_vec is None and params is not None:
        alpha_vec = resolve_alpha_vec(params, lam.size)
    a = np.asarray(alpha_vec, dtype=float)
    if a.shape != lam.shape:
        raise DimensionMismatch(f"alpha_vec has shape {a.shape}, expected {lam.shape}")
    return float(lam @ y + 0.5 * np.sum(a * y * y))


def complementarity_margin(sol: QPSolution, params: AgentParams, prices) -> float:
    """Smallest max(dual, slack) over the finite constraints.

    A small margin means some constraint is simultaneously near-active and
    near-dual-zero, i.e. strict complementarity is close to failing and the
    solution map may not be differentiable there.
    """
    lam = _as_price_vector(prices)
    T = lam.size
    cons = build_constraints(params, T)
    if cons.h.size == 0:
        return np.inf
    slack = cons.h - cons.g @ np.asarray(sol.y, dtype=float)
    fam_vec = [sol.mu_hi, sol.mu_lo, sol.nu_hi, sol.nu_lo]
    w = np.array([fam_vec[cons.family[j]][cons.index[j]] for j in range(cons.h.size)])
    return float(np.min(np.maximum(w, slack)))
