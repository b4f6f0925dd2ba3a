"""Operator and user economics plus the scheduling constraint checks."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .building import BaselineProfile, BuildingParams, DemandResponse, Violation

T = 24


@dataclass(frozen=True)
class TariffTable:
    p_buy: np.ndarray
    p_sell: np.ndarray
    gamma_min: float = 0.3
    gamma_max: float = 0.66
    mu_av: float = 0.65
    gamma_av: float = 0.5

    def __post_init__(self):
        for name in ("p_buy", "p_sell"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (T,):
                raise ValueError(f"{name} must have {T} hourly values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.p_sell > self.p_buy):
            raise ValueError("feed-in price exceeds purchase price")
        if np.any(self.p_sell <= 0) or not 0 < self.gamma_min <= self.gamma_max:
            raise ValueError("price bounds must be positive and ordered")
        if self.mu_av <= 0 or self.gamma_av <= 0:
            raise ValueError("average caps must be positive")

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.p_sell, np.full(T, self.gamma_min)])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.p_buy, np.full(T, self.gamma_max)])


@dataclass(frozen=True)
class PriceSchedule:
    mu_sell: np.ndarray
    gamma_sell: np.ndarray

    def __post_init__(self):
        for name in ("mu_sell", "gamma_sell"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (T,):
                raise ValueError(f"{name} must have {T} hourly values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_genome(cls, x) -> "PriceSchedule":
        x = np.asarray(x, dtype=float)
        if x.shape != (2 * T,):
            raise ValueError(f"genome must have {2 * T} genes")
        return cls(x[:T], x[T:])

    def to_genome(self) -> np.ndarray:
        return np.concatenate([self.mu_sell, self.gamma_sell])

    def to_dict(self) -> dict:
        return {"mu_sell": [float(v) for v in self.mu_sell], "gamma_sell": [float(v) for v in self.gamma_sell]}

    @classmethod
    def from_dict(cls, d) -> "PriceSchedule":
        return cls(np.array(d["mu_sell"]), np.array(d["gamma_sell"]))


def price_check(prices: PriceSchedule, tariff: TariffTable, tol: float = 1e-9) -> list[Violation]:
    out = []
    mu, g = prices.mu_sell, prices.gamma_sell
    for t in range(T):
        if mu[t] < tariff.p_sell[t] - tol or mu[t] > tariff.p_buy[t] + tol:
            out.append(Violation("price_bounds", t + 1, f"electricity price {mu[t]:.6g} outside "
                                 f"[{tariff.p_sell[t]}, {tariff.p_buy[t]}]"))
        if g[t] < tariff.gamma_min - tol or g[t] > tariff.gamma_max + tol:
            out.append(Violation("price_bounds", t + 1, f"heat price {g[t]:.6g} outside "
                                 f"[{tariff.gamma_min}, {tariff.gamma_max}]"))
    if mu.sum() > T * tariff.mu_av + tol:
        out.append(Violation("price_bounds", None, f"electricity prices sum to {mu.sum():.6g} > {T * tariff.mu_av:.6g}"))
    if g.sum() > T * tariff.gamma_av + tol:
        out.append(Violation("price_bounds", None, f"heat prices sum to {g.sum():.6g} > {T * tariff.gamma_av:.6g}"))
    return out


@dataclass(frozen=True)
class DeviceCostParams:
    mt_a: float = 1.0
    mt_b: float = 0.6
    mt_start: float = 1.3
    chp_a: float = 2.415e-4
    chp_b: float = 0.31
    chp_c: float = 185.5
    chp_d: float = 2.1e-4
    chp_e: float = 0.0294
    chp_f: float = 2.17e-7
    om: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.chp_a < 0 or self.chp_d < 0:
            raise ValueError("quadratic CHP coefficients must be non-negative")

    def beta(self, device: str) -> float:
        return float(self.om.get(device, 0.0))

    def chp_cost(self, p, h):
        """CHP fuel cost; the constant term applies only while producing."""
        p = np.asarray(p, dtype=float)
        h = np.asarray(h, dtype=float)
        running = (p > 0) | (h > 0)
        c = (self.chp_a * p * p + self.chp_b * p + self.chp_d * h * h + self.chp_e * h
             + self.chp_f * p * h + np.where(running, self.chp_c, 0.0))
        return float(c) if c.ndim == 0 else c

    def mt_cost(self, p, psi, startup):
        p = np.asarray(p, dtype=float)
        c = self.mt_start * np.asarray(startup, dtype=float) + np.asarray(psi, dtype=float) * (self.mt_a + self.mt_b * p)
        return float(c) if c.ndim == 0 else c


# devices charged O&M, keyed to the ScenarioDispatch field(s) metering them
OM_METERS = {
    "WT": ("wt",), "PV": ("pv",), "CHP": ("chp_p", "chp_h"), "MT": ("mt_p",), "EB": ("eb_p",),
    "EES": ("ees_ch", "ees_dc"), "HST": ("hst_ch", "hst_dc"),
}


@dataclass
class ScenarioDispatch:
    """Device schedule of every CIES in one scenario; arrays are (J, T).

    ``wt`` and ``pv`` are the renewable output actually used (after
    curtailment).  Tie-line flows are positive into the CIES.  ``unmet_e``
    and ``unmet_h`` carry demand the dispatch could not serve; they are not
    part of either balance and are penalized by the solver.
    """

    wt: np.ndarray
    pv: np.ndarray
    chp_p: np.ndarray
    chp_h: np.ndarray
    mt_p: np.ndarray
    mt_on: np.ndarray
    eb_p: np.ndarray
    ees_ch: np.ndarray
    ees_dc: np.ndarray
    hst_ch: np.ndarray
    hst_dc: np.ndarray
    grid_buy: np.ndarray
    grid_sell: np.ndarray
    tie_p: np.ndarray
    tie_h: np.ndarray
    eb_h: np.ndarray
    curtail: np.ndarray
    unmet_e: np.ndarray
    unmet_h: np.ndarray

    @classmethod
    def zeros(cls, n_cies: int) -> "ScenarioDispatch":
        return cls(**{f.name: np.zeros((n_cies, T)) for f in fields(cls)})

    @property
    def n_cies(self) -> int:
        return self.wt.shape[0]

    def to_dict(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "ScenarioDispatch":
        return cls(**{f.name: np.array(d[f.name], dtype=float) for f in fields(cls)})

    def penalty_mass(self) -> float:
        return float((self.unmet_e ** 2).sum() + (self.unmet_h ** 2).sum())


def sales_revenue(prices: PriceSchedule, p_loads, h_loads) -> np.ndarray:
    """Hourly income from users; loads are (I, T) or (T,)."""
    p = np.atleast_2d(np.asarray(p_loads, dtype=float))
    h = np.atleast_2d(np.asarray(h_loads, dtype=float))
    return (prices.mu_sell * p + prices.gamma_sell * h).sum(axis=0)


def grid_revenue(tariff: TariffTable, d: ScenarioDispatch, cap: float | None = None,
                 tol: float = 1e-6) -> np.ndarray:
    """Hourly grid income per CIES, shape (J, T)."""
    if np.any(d.grid_buy < -tol) or np.any(d.grid_sell < -tol):
        raise ValueError("grid exchange must be non-negative")
    if cap is not None and (np.any(d.grid_buy > cap + tol) or np.any(d.grid_sell > cap + tol)):
        raise ValueError(f"grid exchange exceeds the {cap} kW limit")
    return tariff.p_sell * d.grid_sell - tariff.p_buy * d.grid_buy


def startup_indicator(psi, psi0=0) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    prev = np.concatenate([np.broadcast_to(np.asarray(psi0, dtype=float), psi.shape[:-1] + (1,)),
                           psi[..., :-1]], axis=-1)
    return np.maximum(psi - prev, 0.0)


def operating_cost(costs: DeviceCostParams, d: ScenarioDispatch, psi0=0) -> np.ndarray:
    """Hourly fuel plus O&M cost per CIES, shape (J, T)."""
    c = costs.mt_cost(d.mt_p, d.mt_on, startup_indicator(d.mt_on, psi0))
    c = c + costs.chp_cost(d.chp_p, d.chp_h)
    for dev, meters in OM_METERS.items():
        b = costs.beta(dev)
        if b:
            for m in meters:
                c = c + b * getattr(d, m)
    return c


def scenario_profit(prices, tariff, costs, p_loads, h_loads, d: ScenarioDispatch, psi0=0) -> float:
    """Operator profit of one scenario, without penalties."""
    inc = sales_revenue(prices, p_loads, h_loads).sum()
    g = grid_revenue(tariff, d).sum()
    c = operating_cost(costs, d, psi0).sum()
    return float(inc + g - c)


def net_profit(probabilities, prices, tariff, costs, p_loads, h_loads, dispatches, psi0=0) -> float:
    probabilities = np.asarray(probabilities, dtype=float)
    if len(dispatches) != len(probabilities):
        raise ValueError(f"{len(probabilities)} scenarios but {len(dispatches)} dispatches")
    if any(d is None for d in dispatches):
        raise ValueError("missing dispatch for a scenario")
    total = 0.0
    for pi, d in zip(probabilities, dispatches):
        total += pi * scenario_profit(prices, tariff, costs, p_loads, h_loads, d, psi0)
    return total


def cies_demand(p_loads, building_cies, n_cies: int) -> np.ndarray:
    """Electric demand per CIES, (J, T), from per-building loads (I, T)."""
    p = np.atleast_2d(np.asarray(p_loads, dtype=float))
    out = np.zeros((n_cies, p.shape[1]))
    for i, j in enumerate(building_cies):
        out[j] += p[i]
    return out


def delayed_heat_demand(h_loads, losses, delays, building_cies, n_cies: int) -> np.ndarray:
    """Heat each CIES must send at hour t, (J, T).

    Building i is served through a pipe with delay d_i periods, so supply at
    t covers its load (plus pipe loss) at t + d_i, wrapping around the day.
    """
    h = np.atleast_2d(np.asarray(h_loads, dtype=float))
    dh = np.atleast_2d(np.asarray(losses, dtype=float))
    out = np.zeros((n_cies, h.shape[1]))
    for i, j in enumerate(building_cies):
        out[j] += np.roll(h[i] + dh[i], -int(delays[i]))
    return out


def electric_balance_residual(d: ScenarioDispatch, p_demand, hour: int | None = None) -> np.ndarray:
    """Supply minus demand of the electric balance; (J, T) or (J,) at one hour (1..24)."""
    supply = d.wt + d.pv + d.chp_p + d.mt_p + d.tie_p + d.ees_dc + d.grid_buy
    demand = np.asarray(p_demand, dtype=float) + d.ees_ch + d.eb_p + d.grid_sell
    r = supply - demand
    return r if hour is None else r[:, hour - 1]


def heat_balance_residual(d: ScenarioDispatch, h_demand, hour: int | None = None) -> np.ndarray:
    """Supply minus demand of the heat balance; ``h_demand`` already delay/loss adjusted."""
    supply = d.chp_h + d.eb_h + d.hst_dc + d.tie_h
    demand = np.asarray(h_demand, dtype=float) + d.hst_ch
    r = supply - demand
    return r if hour is None else r[:, hour - 1]


def tie_line_check(d: ScenarioDispatch, p_cap: float = 400.0, h_cap: float = 400.0,
                   tol: float = 1e-6) -> list[Violation]:
    out = []
    for name, flows, cap in (("electric", d.tie_p, p_cap), ("heat", d.tie_h, h_cap)):
        flows = np.atleast_2d(flows)
        for j in range(flows.shape[0]):
            for t in range(flows.shape[1]):
                if abs(flows[j, t]) > cap + tol:
                    out.append(Violation("tie_line", t + 1, f"CIES {j} {name} tie flow {flows[j, t]:.6g} "
                                         f"beyond +/-{cap}"))
            s = float(flows[j].sum())
            if abs(s) > tol * max(1.0, cap):
                out.append(Violation("tie_line", None, f"CIES {j} {name} tie flows sum to {s:.6g}", s))
        if flows.shape[0] == 2 and np.abs(flows[0] + flows[1]).max() > tol:
            out.append(Violation("tie_line", None, f"{name} tie flows of the two CIES do not mirror"))
    return out


def follower_cost(prices: PriceSchedule, params: BuildingParams, base: BaselineProfile,
                  dr: DemandResponse, probabilities=None) -> float:
    """Energy bill plus discomfort of one user.

    Responses are scenario independent, so the scenario weights only scale
    the total by their sum (one for a proper scenario set).
    """
    w = 1.0 if probabilities is None else float(np.sum(probabilities))
    p = base.p0 + dr.tsl - dr.il
    h = base.h0 - dr.ch
    bill = prices.mu_sell * p + prices.gamma_sell * h
    disc = params.omega * dr.tsl ** 2 + params.vartheta * dr.il ** 2 + params.theta * dr.ch ** 2
    return w * float((bill + disc).sum())


def discomfort_cost(params: BuildingParams, dr: DemandResponse) -> float:
    return float((params.omega * dr.tsl ** 2 + params.vartheta * dr.il ** 2 + params.theta * dr.ch ** 2).sum())
