"""Joint identification: warm start, composed forward pass, gradients, updates.

The net-demand prediction for a scenario is the forecast plus the agent's
solved response; the squared error against the measured net demand is
backpropagated along two separable routes.  The forecaster route is ordinary
reverse mode through the net.  The agent route goes through the response by
implicit differentiation: one transposed solve of the assembled optimality
system per scenario yields the coefficient gradients.  When the disutility
curvature is modeled as demand-dependent, the chain through the per-step
curvature adds a second forecaster term.

The direct-identification mode skips the forecaster entirely and fits the
agent coefficients to observed (possibly noisy) responses; it is what the
noise-robustness study runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import json
import numpy as np

from .agent_qp import (
    ALPHA_MIN,
    GHOST_GAP,
    INF_BOUND,
    AgentModelKind,
    AgentParams,
    solve_agent_qp_batch,
)
from .baseline_net import (
    BaselineNetParams,
    adam_init,
    adam_step,
    backward,
    fit_normalization,
    flatten_params,
    forward,
    init_baseline_net,
    unflatten_params,
)
from .errors import DegenerateRun, DimensionMismatch, NonFiniteGradient
from .kkt_backward import build_kkt_batch, vjp_agent_batch
from .metrics import MetricsRecord, mae, mape


@dataclass
class TrainConfig:
    """Training knobs; defaults follow the full-scale study protocol."""

    eta1: float = 1e-3            # forecaster learning rate
    eta2: float = 1e-1            # agent-coefficient learning rate
    epochs: int = 500
    warm_start_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    demand_dependent: bool = False
    direct_response_mode: bool = False
    hidden_sizes: tuple = (200, 100, 100)
    activation: str = "relu"
    agent_kind: str = "total_budget"
    alpha_init: float = 30.0
    m_init: float = 5.0
    bound_init: float = INF_BOUND  # box/energy bound init for general-box runs
    alpha_max: float = 1e4
    m_max: float = 1e4
    plateau_epochs: int = 50
    plateau_rel_tol: float = 1e-5
    polish_steps: int = 200        # per decayed full-batch stage in direct mode
    d_min: float = 0.0             # curvature floor demand when demand_dependent

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class ScenarioArrays:
    """Columnar view of a scenario list for batched math."""

    ids: list
    lam: np.ndarray                 # (N, T)
    x: np.ndarray                   # (N, m)
    z: np.ndarray                   # (N, T)
    d_true: np.ndarray | None
    y_true: np.ndarray | None
    y_obs: np.ndarray | None
    truth_params: list

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @property
    def horizon(self) -> int:
        return self.lam.shape[1]


def from_scenarios(scenarios) -> ScenarioArrays:
    if not scenarios:
        raise DimensionMismatch("empty scenario list")
    lam = np.array([sc.lam for sc in scenarios])
    xs = np.array([sc.x for sc in scenarios])
    zs = np.array([sc.z for sc in scenarios])
    d_true = (np.array([sc.truth_baseline for sc in scenarios])
              if all(sc.truth_baseline is not None for sc in scenarios) else None)
    y_true = (np.array([sc.truth_response for sc in scenarios])
              if all(sc.truth_response is not None for sc in scenarios) else None)
    y_obs = (np.array([sc.y_observed for sc in scenarios])
             if all(sc.y_observed is not None for sc in scenarios) else None)
    return ScenarioArrays(ids=[sc.id for sc in scenarios], lam=lam, x=xs, z=zs,
                          d_true=d_true, y_true=y_true, y_obs=y_obs,
                          truth_params=[sc.truth_params for sc in scenarios])


# --- agent coefficient vector <-> AgentParams ---------------------------------

def theta_init(config: TrainConfig) -> np.ndarray:
    if config.agent_kind == "total_budget":
        return np.array([config.alpha_init, config.m_init])
    if config.agent_kind == "general_box":
        b = config.bound_init
        return np.array([config.alpha_init, -b, b, -b, b])
    raise ValueError(f"unknown agent kind {config.agent_kind!r}")


def theta_to_params(theta: np.ndarray, config: TrainConfig) -> AgentParams:
    if config.agent_kind == "total_budget":
        return AgentParams.total_budget(theta[0], theta[1])
    return AgentParams.general_box(theta[0], theta[1], theta[2], theta[3], theta[4])


def theta_project(theta: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Keep the coefficients inside the solver-feasible region after a step."""
    out = theta.copy()
    out[0] = np.clip(out[0], ALPHA_MIN, config.alpha_max)
    if config.agent_kind == "total_budget":
        out[1] = np.clip(out[1], 0.0, config.m_max)
    else:
        out[1] = min(out[1], 0.0)   # p_low <= 0
        out[2] = max(out[2], 0.0)   # p_high >= 0
        out[3] = min(out[3], 0.0)   # e_low <= 0
        out[4] = max(out[4], 0.0)   # e_high >= 0
    return out


def theta_dict(theta: np.ndarray, config: TrainConfig) -> dict:
    if config.agent_kind == "total_budget":
        return {"alpha": float(theta[0]), "m_budget": float(theta[1])}
    return {"alpha": float(theta[0]), "p_low": float(theta[1]), "p_high": float(theta[2]),
            "e_low": float(theta[3]), "e_high": float(theta[4])}


def _gather_theta_grads(g: dict, config: TrainConfig) -> np.ndarray:
    """Per-scenario coefficient gradients stacked as (N, len(theta))."""
    if config.agent_kind == "total_budget":
        return np.stack([g["alpha"], g["m"]], axis=1)
    return np.stack([g["alpha"], g["p_lo"], g["p_hi"], g["e_lo"], g["e_hi"]], axis=1)


# --- losses and gradients ------------------------------------------------------

def net_demand_loss(d_hat, y_star, z) -> float:
    """Half squared error of the composed prediction; batches average over rows."""
    d_hat, y_star, z = (np.asarray(v, float) for v in (d_hat, y_star, z))
    if not (d_hat.shape == y_star.shape == z.shape):
        raise DimensionMismatch(
            f"shapes disagree: {d_hat.shape}, {y_star.shape}, {z.shape}")
    r = d_hat + y_star - z
    if r.ndim == 1:
        return float(0.5 * np.sum(r * r))
    return float(0.5 * np.mean(np.sum(r * r, axis=1)))


def _alpha_schedule(theta, d_hat, config: TrainConfig):
    """Per-step curvature and its partials when curvature tracks the baseline.

    alpha_t = alpha / (d_hat_t - d_min), clipped below at the admissible
    curvature floor; clipped steps contribute no chain gradient.
    """
    head = np.maximum(d_hat - config.d_min, GHOST_GAP)
    raw = theta[0] / head
    a = np.maximum(raw, ALPHA_MIN)
    active = (raw >= ALPHA_MIN) & (d_hat - config.d_min >= GHOST_GAP)
    da_dalpha = np.where(active, 1.0 / head, 0.0)
    da_dd = np.where(active, -theta[0] / head ** 2, 0.0)
    return a, da_dalpha, da_dd


def loss_gradients(arrays: ScenarioArrays, idx, net: BaselineNetParams | None,
                   theta: np.ndarray, config: TrainConfig):
    """Loss and gradients over the scenarios selected by ``idx``.

    Returns (loss, g_theta, net_grads_or_None, n_skipped).  Scenarios whose
    backward systems stay unsolvable even individually are skipped and
    counted; their forward term still enters the loss.
    """
    idx = np.asarray(idx, int)
    lam = arrays.lam[idx]
    n_b = idx.size
    params = theta_to_params(theta, config)

    if config.direct_response_mode:
        target = arrays.y_obs[idx] if arrays.y_obs is not None else arrays.y_true[idx]
        if target is None:
            raise DimensionMismatch("direct mode needs observed or true responses")
        y, *duals, _ = solve_agent_qp_batch(params, lam)
        r = y - target
        loss = float(0.5 * np.mean(np.sum(r * r, axis=1)))
        upstream = r / n_b
        a_vec = np.full(lam.shape, float(theta[0]))
        g_th, skipped = _theta_grads(y, duals, params, a_vec, upstream, config)
        return loss, g_th, None, skipped

    d_hat = forward(net, arrays.x[idx])
    if config.demand_dependent:
        a_vec, da_dalpha, da_dd = _alpha_schedule(theta, d_hat, config)
    else:
        a_vec = np.full(lam.shape, float(theta[0]))
    y, *duals, _ = solve_agent_qp_batch(params, lam, alpha_vec=a_vec)
    r = d_hat + y - arrays.z[idx]
    loss = float(0.5 * np.mean(np.sum(r * r, axis=1)))
    upstream = r / n_b

    g_th, skipped, g_alpha_vec = _theta_grads(y, duals, params, a_vec, upstream,
                                              config, want_alpha_vec=True)
    upstream_net = upstream.copy()
    if config.demand_dependent:
        # chain through the curvature schedule: response depends on the
        # forecast via alpha_t(d_hat_t), and theta's alpha acts through it too
        upstream_net += g_alpha_vec * da_dd
        g_th = g_th.copy()
        g_th[0] = float(np.sum(g_alpha_vec * da_dalpha))
    net_grads, _ = backward(net, arrays.x[idx], upstream_net)
    return loss, g_th, net_grads, skipped


def _theta_grads(y, duals, params, a_vec, upstream, config, want_alpha_vec=False):
    a_stack = build_kkt_batch(y, duals, params, a_vec)
    g, bad = vjp_agent_batch(a_stack, y, duals, upstream, params.kind)
    skipped = int(bad.sum())
    if skipped:
        for key in ("alpha", "p_hi", "p_lo", "e_hi", "e_lo", "m"):
            g[key] = np.where(bad, 0.0, g[key])
        g["alpha_vec"] = np.where(bad[:, None], 0.0, g["alpha_vec"])
    per_scenario = _gather_theta_grads(g, config)
    g_th = per_scenario.sum(axis=0)
    if want_alpha_vec:
        return g_th, skipped, g["alpha_vec"]
    return g_th, skipped


def e2e_step(arrays: ScenarioArrays, idx, net, theta, net_opt, theta_opt,
             config: TrainConfig):
    """One joint update; returns (loss, net', theta', n_skipped).

    The two routes are separable: the forecaster update never reads the agent
    optimizer state and vice versa.
    """
    loss, g_th, net_grads, skipped = loss_gradients(arrays, idx, net, theta, config)
    if not np.all(np.isfinite(g_th)):
        raise NonFiniteGradient(f"agent gradient not finite: {g_th}")
    new_theta = theta_project(adam_step(theta_opt, [theta], [g_th])[0], config)
    new_net = net
    if net_grads is not None:
        gw, gb = net_grads
        flat_grads = list(gw) + list(gb)
        if not all(np.all(np.isfinite(g)) for g in flat_grads):
            raise NonFiniteGradient("forecaster gradient not finite")
        new_arrays = adam_step(net_opt, flatten_params(net), flat_grads)
        new_net = unflatten_params(net, new_arrays)
    return loss, new_net, new_theta, skipped


def warm_start(arrays: ScenarioArrays, net: BaselineNetParams, config: TrainConfig,
               rng: np.random.Generator):
    """Pre-fit the forecaster to net-demand measurements (not true baselines)."""
    losses = []
    if config.warm_start_epochs <= 0:
        return net, losses
    opt = adam_init(flatten_params(net), lr=config.eta1)
    n = arrays.n
    for _ in range(config.warm_start_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            d_hat = forward(net, arrays.x[idx])
            r = d_hat - arrays.z[idx]
            epoch_loss += float(0.5 * np.sum(r * r))
            grads, _ = backward(net, arrays.x[idx], r / idx.size)
            gw, gb = grads
            new_arrays = adam_step(opt, flatten_params(net), list(gw) + list(gb))
            net = unflatten_params(net, new_arrays)
        losses.append(epoch_loss / n)
    return net, losses


@dataclass
class TrainReport:
    """Everything a run produced: losses, identified coefficients, metrics."""

    config: dict
    theta_hat: dict
    warm_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    skipped_scenarios: int = 0
    param_errors: dict | None = None
    a_priori: dict | None = None
    ex_post: dict | None = None
    net_floor: dict | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "theta_hat": self.theta_hat,
            "warm_losses": self.warm_losses,
            "epoch_losses": self.epoch_losses,
            "theta_history": self.theta_history,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "skipped_scenarios": self.skipped_scenarios,
            "param_errors": self.param_errors,
            "a_priori": self.a_priori,
            "ex_post": self.ex_post,
            "net_floor": self.net_floor,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _plateaued(losses, window: int, rel_tol: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    return prev - cur < rel_tol * max(abs(prev), 1e-12)


def train(split, config: TrainConfig, net: BaselineNetParams | None = None):
    """Run the full identification protocol on a train/test split.

    Returns (report, net, theta).  ``split`` needs ``.train``/``.test``
    scenario lists; metrics needing ground truth are omitted when the split
    carries none.
    """
    train_arrays = from_scenarios(split.train)
    test_arrays = from_scenarios(split.test) if split.test else None
    rng = np.random.default_rng([int(config.seed), 777])
    theta = theta_init(config)
    report = TrainReport(config=config.to_dict(), theta_hat=theta_dict(theta, config))

    if config.direct_response_mode:
        net = None
    elif net is None:
        net = init_baseline_net(train_arrays.x.shape[1], config.hidden_sizes,
                                train_arrays.horizon, rng, config.activation)
        net.feat_mean, net.feat_std = fit_normalization(train_arrays.x)

    if not config.direct_response_mode:
        net, warm_losses = warm_start(train_arrays, net, config, rng)
        report.warm_losses = warm_losses

    theta_opt = adam_init([theta], lr=config.eta2)
    net_opt = adam_init(flatten_params(net), lr=config.eta1) if net is not None else None
    n = train_arrays.n
    total_skipped = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, net, theta, skipped = e2e_step(
                train_arrays, idx, net, theta, net_opt, theta_opt, config)
            epoch_loss += loss * idx.size
            total_skipped += skipped
        report.epoch_losses.append(epoch_loss / n)
        report.theta_history.append(theta_dict(theta, config))
        report.epochs_run = epoch + 1
        if _plateaued(report.epoch_losses, config.plateau_epochs, config.plateau_rel_tol):
            report.stopped_early = True
            break

    if config.direct_response_mode:
        # deterministic full-batch polish at decayed rates settles the estimate
        all_idx = np.arange(n)
        for decade in (10.0, 100.0):
            opt = adam_init([theta], lr=config.eta2 / decade)
            for _ in range(config.polish_steps):
                loss, g_th, _, skipped = loss_gradients(
                    train_arrays, all_idx, None, theta, config)
                theta = theta_project(adam_step(opt, [theta], [g_th])[0], config)
                total_skipped += skipped
            report.epoch_losses.append(loss)
            report.theta_history.append(theta_dict(theta, config))

    report.skipped_scenarios = total_skipped
    budget = config.epochs * max(1, n // config.batch_size) * 0.10 * config.batch_size
    if total_skipped > max(budget, 0.10 * n * max(1, report.epochs_run)):
        raise DegenerateRun(
            f"{total_skipped} scenario gradients skipped; run is not trustworthy")

    report.theta_hat = theta_dict(theta, config)
    report.param_errors = _param_errors(theta, train_arrays, config)
    if test_arrays is not None and net is not None:
        report.a_priori = a_priori_estimate(net, test_arrays)["metrics"]
        report.ex_post = ex_post_estimate(theta, test_arrays, config)["metrics"]
        report.net_floor = net_floor_metrics(test_arrays)
    return report, net, theta


def _param_errors(theta, arrays: ScenarioArrays, config: TrainConfig):
    truths = [p for p in arrays.truth_params if p is not None]
    if not truths or config.agent_kind != "total_budget":
        return None
    alpha_true = float(np.mean([p.alpha for p in truths]))
    m_true = float(np.mean([p.m_budget for p in truths]))
    return {"alpha_true": alpha_true, "m_true": m_true,
            "alpha_abs_err": abs(float(theta[0]) - alpha_true),
            "m_abs_err": abs(float(theta[1]) - m_true)}


def a_priori_estimate(net: BaselineNetParams, arrays: ScenarioArrays) -> dict:
    """Forecast-only baseline estimate; metrics omitted without ground truth."""
    d_hat = forward(net, arrays.x)
    metrics = None
    if arrays.d_true is not None:
        metrics = {"mae": mae(d_hat, arrays.d_true), "mape": mape(d_hat, arrays.d_true)}
    return {"predictions": d_hat, "metrics": metrics}


def ex_post_estimate(theta, arrays: ScenarioArrays, config: TrainConfig) -> dict:
    """Baseline recovered by removing the modeled response from measurements."""
    params = theta_to_params(np.asarray(theta, float), config)
    y, *_ = solve_agent_qp_batch(params, arrays.lam)
    d_tilde = arrays.z - y
    metrics = None
    if arrays.d_true is not None:
        metrics = {"mae": mae(d_tilde, arrays.d_true), "mape": mape(d_tilde, arrays.d_true)}
    return {"predictions": d_tilde, "metrics": metrics}


def net_floor_metrics(arrays: ScenarioArrays) -> dict | None:
    """Error of using net demand itself as the baseline estimate."""
    if arrays.d_true is None:
        return None
    return {"mae": mae(arrays.z, arrays.d_true), "mape": mape(arrays.z, arrays.d_true)}
