"""Synthetic scenario generation: demand profiles, prices, agents, noise.

Profiles are fully synthetic stand-ins for metered feeder data: a double-peak
diurnal shape, a temperature-driven heating/cooling component, a weekly
rhythm, and seeded noise, rescaled so the pooled statistics of a generated
year match the published summary statistics of the reference feeder (mean
11.33 kW, std 6.17 kW, range [2.4, 41.5] kW) within a +/-15% envelope.
Prices follow a day-ahead pattern (morning/evening peaks, day-to-day level
swings).  Every quantity is a pure function of (spec, seed, day) via per-day
derived generator streams, so parallel and serial generation agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .agent_qp import AgentParams, solve_agent_qp_batch
from .errors import InvalidSpec

# pooled statistics of the reference demand profile and the accepted envelope
TARGET_MEAN_KW = 11.332
TARGET_STD_KW = 6.166
TARGET_MIN_KW = 2.401
TARGET_MAX_KW = 41.534
STATS_TOLERANCE = 0.15

DEFAULT_MIXTURE = ((20.0, 3.0), (50.0, 0.5))  # (alpha, budget) responsive/stiff pair

N_FEATURES = 7  # tmean, tmax, tmin, sin/cos day-of-year, sin/cos day-of-week


@dataclass
class GenSpec:
    """Knobs of the synthetic protocol; defaults reproduce the full-scale study."""

    n_train: int = 200
    n_test: int = 60
    horizon: int = 24
    alpha_range: tuple = (10.0, 50.0)
    m_range: tuple = (1.0, 10.0)
    noise_sigma: float = 0.0
    seed: int = 0
    mixture: tuple | None = None        # ((alpha, m), (alpha, m)) or None
    mixture_block: int = 50             # days per contiguous block

    def validate(self) -> None:
        if self.n_train < 1:
            raise InvalidSpec(f"n_train must be >= 1, got {self.n_train}")
        if self.n_test < 0:
            raise InvalidSpec(f"n_test must be >= 0, got {self.n_test}")
        if self.horizon < 1:
            raise InvalidSpec(f"horizon must be >= 1, got {self.horizon}")
        for name, rng_ in (("alpha_range", self.alpha_range), ("m_range", self.m_range)):
            if rng_[0] > rng_[1]:
                raise InvalidSpec(f"{name} is not ordered: {rng_}")
        if self.noise_sigma < 0:
            raise InvalidSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.mixture is not None and self.mixture_block < 1:
            raise InvalidSpec("mixture_block must be >= 1")


@dataclass
class Scenario:
    """One optimization window with its observations and optional ground truth."""

    id: str
    lam: np.ndarray
    x: np.ndarray
    z: np.ndarray
    truth_baseline: np.ndarray | None = None
    truth_response: np.ndarray | None = None
    truth_params: AgentParams | None = None
    y_observed: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.lam.size

    def copy(self) -> "Scenario":
        return Scenario(
            id=self.id, lam=self.lam.copy(), x=self.x.copy(), z=self.z.copy(),
            truth_baseline=None if self.truth_baseline is None else self.truth_baseline.copy(),
            truth_response=None if self.truth_response is None else self.truth_response.copy(),
            truth_params=self.truth_params,
            y_observed=None if self.y_observed is None else self.y_observed.copy())


@dataclass
class DataSplit:
    train: list
    test: list

    @property
    def all(self) -> list:
        return list(self.train) + list(self.test)


def _day_rng(spec: GenSpec, day: int, stream: int) -> np.random.Generator:
    """Independent per-day generator stream derived from the master seed."""
    return np.random.default_rng([int(spec.seed), int(day), int(stream)])


def _hours(horizon: int) -> np.ndarray:
    return (np.arange(horizon) + 0.5) * 24.0 / horizon


def gen_baseline(spec: GenSpec, day: int):
    """Daily demand profile (kW, length T) and the features that drove it."""
    rng = _day_rng(spec, day, 0)
    T = spec.horizon
    h = _hours(T)

    doy = day % 365
    dow = day % 7
    season = 2.0 * np.pi * doy / 365.0
    temp_mean = 13.0 + 12.0 * np.sin(season - 1.9) + rng.normal(0.0, 2.0)
    temp = temp_mean + 5.5 * np.cos(2.0 * np.pi * (h - 15.0) / 24.0)

    weekday_factor = 0.90 if dow in (5, 6) else 1.0
    shape = (0.42 + 0.62 * np.exp(-((h - 8.0) / 2.4) ** 2)
             + 1.35 * np.exp(-((h - 18.8) / 2.9) ** 2))
    season_level = 1.0 + 0.28 * np.sin(season - 1.6)

    comfort = 0.75 * np.maximum(temp - 19.0, 0.0) + 0.50 * np.maximum(10.0 - temp, 0.0)

    noise = np.empty(T)
    level = rng.normal(0.0, 1.0)
    ar = 0.0
    for t in range(T):
        ar = 0.75 * ar + rng.normal(0.0, 0.75)
        noise[t] = level + ar

    d = 10.5 * shape * weekday_factor * season_level + comfort + noise
    d = np.clip(d, TARGET_MIN_KW + 0.1, TARGET_MAX_KW - 0.5)

    x = np.array([temp_mean, float(temp.max()), float(temp.min()),
                  np.sin(season), np.cos(season),
                  np.sin(2.0 * np.pi * dow / 7.0), np.cos(2.0 * np.pi * dow / 7.0)])
    return d, x


def gen_price(spec: GenSpec, day: int) -> np.ndarray:
    """Day-ahead style price path: strictly positive, peaked, day-varying level.

    Within-day swings are deliberately strong; the identification signal for
    the disutility curvature scales with the squared price deviations, so a
    flat tariff would leave the curvature ill-determined under noise.
    """
    rng = _day_rng(spec, day, 1)
    T = spec.horizon
    h = _hours(T)
    level = 110.0 * np.exp(rng.normal(0.0, 0.25))
    shape = (0.42 + 0.50 * np.exp(-((h - 8.5) / 2.0) ** 2)
             + 1.25 * np.exp(-((h - 18.5) / 2.6) ** 2))
    lam = level * shape * (1.0 + 0.20 * rng.standard_normal(T))
    return np.clip(lam, 1.0, 400.0)


def sample_agent(spec: GenSpec, rng: np.random.Generator) -> AgentParams:
    """Ground-truth budget agent with uniformly sampled coefficients."""
    alpha = rng.uniform(*spec.alpha_range)
    m = rng.uniform(*spec.m_range)
    return AgentParams.total_budget(alpha, m)


def _assemble(spec: GenSpec, day_params) -> DataSplit:
    """Generate scenarios for all days given a per-day truth agent mapping."""
    n_total = spec.n_train + spec.n_test
    baselines, feats, prices = [], [], []
    for day in range(n_total):
        d, x = gen_baseline(spec, day)
        baselines.append(d)
        feats.append(x)
        prices.append(gen_price(spec, day))
    lam = np.array(prices)

    scenarios = []
    # group days sharing the same agent so the forward solves run batched
    unique = {}
    for day in range(n_total):
        unique.setdefault(id(day_params[day]), (day_params[day], []))[1].append(day)
    responses = np.empty((n_total, spec.horizon))
    for params, days in unique.values():
        y, *_ = solve_agent_qp_batch(params, lam[days])
        responses[days] = y

    noise_rng = np.random.default_rng([int(spec.seed), 2 ** 20])
    for day in range(n_total):
        d = baselines[day]
        y = responses[day]
        z = d + y
        if spec.noise_sigma > 0:
            z = z + noise_rng.normal(0.0, spec.noise_sigma, size=spec.horizon)
        tag = ("train", day) if day < spec.n_train else ("test", day - spec.n_train)
        scenarios.append(Scenario(
            id=f"{tag[0]}-{tag[1]:03d}", lam=lam[day], x=feats[day], z=z,
            truth_baseline=d, truth_response=y, truth_params=day_params[day]))
    return DataSplit(train=scenarios[:spec.n_train], test=scenarios[spec.n_train:])


def gen_dataset(spec: GenSpec) -> DataSplit:
    """Full synthetic dataset: one sampled truth agent drives every day."""
    spec.validate()
    agent_rng = np.random.default_rng([int(spec.seed), 2 ** 21])
    truth = sample_agent(spec, agent_rng)
    n_total = spec.n_train + spec.n_test
    return _assemble(spec, {day: truth for day in range(n_total)})


def gen_mixture(spec: GenSpec) -> DataSplit:
    """Dataset drawn from two agents alternating in contiguous blocks of days."""
    spec.validate()
    pair = spec.mixture if spec.mixture is not None else DEFAULT_MIXTURE
    models = [AgentParams.total_budget(a, m) for a, m in pair]
    n_total = spec.n_train + spec.n_test
    day_params = {day: models[(day // spec.mixture_block) % 2] for day in range(n_total)}
    return _assemble(spec, day_params)


def add_noise(scenarios, sigma: float, rng: np.random.Generator,
              target: str = "response"):
    """Perturb observations with zero-mean Gaussian noise; truths stay intact.

    target="response" writes a noisy copy of the true response into
    ``y_observed`` (the direct-identification setting); target="net" perturbs
    the net-demand measurement.  sigma=0 returns the input unchanged.
    """
    if target not in ("response", "net"):
        raise InvalidSpec(f"noise target must be 'response' or 'net', got {target!r}")
    if sigma < 0:
        raise InvalidSpec(f"sigma must be >= 0, got {sigma}")
    if sigma == 0 and target == "net":
        return scenarios
    out = []
    for sc in scenarios:
        c = sc.copy()
        if target == "response":
            base = c.truth_response if c.y_observed is None else c.y_observed
            c.y_observed = base + (rng.normal(0.0, sigma, size=c.horizon)
                                   if sigma > 0 else 0.0)
        else:
            c.z = c.z + rng.normal(0.0, sigma, size=c.horizon)
        out.append(c)
    return out


def pooled_stats(scenarios) -> dict:
    """Pooled mean/std/min/max of true baselines across a scenario list."""
    d = np.concatenate([sc.truth_baseline for sc in scenarios])
    return {"mean": float(d.mean()), "std": float(d.std()),
            "min": float(d.min()), "max": float(d.max())}
