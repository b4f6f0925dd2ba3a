"""Building users: thermal comfort, baseline loads and demand-response bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T = 24
DAY_HOURS = range(8, 20)  # 8:00-19:00 use the tight comfort cap
PMV_CAP_DAY = 0.5
PMV_CAP_NIGHT = 0.9


@dataclass(frozen=True)
class Violation:
    constraint: str
    hour: int | None
    detail: str
    amount: float = 0.0

    def __str__(self):
        where = "" if self.hour is None else f" at hour {self.hour}"
        return f"{self.constraint}{where}: {self.detail}"


class DemandResponseError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class BuildingParams:
    """Envelope, occupant and discomfort parameters of one building.

    K in W/(m2 degC), F in m2, V in m3, c_air in kJ/(kg degC), rho_air in
    kg/m3, M in W/m2, I_cl in m2 degC/W, T_s in degC.  The discomfort
    coefficients (yuan/kW^2) are checked by the convexity certificate rather
    than here, so that degenerate users can still be represented.
    """

    K: float
    F: float
    V: float
    c_air: float = 1.007
    rho_air: float = 1.2
    M: float = 80.0
    I_cl: float = 0.161
    T_s: float = 33.5
    omega: float = 0.003
    vartheta: float = 0.01
    theta: float = 0.008

    def __post_init__(self):
        for name in ("K", "F", "V", "c_air", "rho_air", "M", "I_cl", "T_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def kf_kw(self) -> float:
        """Envelope conductance in kW/degC."""
        return self.K * self.F / 1000.0

    @property
    def capacity_kwh(self) -> float:
        """Indoor air heat capacity in kWh/degC."""
        return self.c_air * self.rho_air * self.V / 3600.0


def pmv(params: BuildingParams, t_in: float) -> float:
    return 2.43 - 3.76 * (params.T_s - t_in) / (params.M * (params.I_cl + 0.1))


def pmv_cap(hour: int) -> float:
    if not 1 <= hour <= T:
        raise ValueError(f"hour must be in 1..{T}")
    return PMV_CAP_DAY if hour in DAY_HOURS else PMV_CAP_NIGHT


def temperature_at_pmv(params: BuildingParams, value: float) -> float:
    return params.T_s - (2.43 - value) * params.M * (params.I_cl + 0.1) / 3.76


def comfort_band(params: BuildingParams, hour: int, cap: float | None = None) -> tuple[float, float]:
    """Indoor temperature interval keeping ``|PMV|`` within the hour's cap."""
    c = pmv_cap(hour) if cap is None else float(cap)
    if c < 0:
        raise ValueError("PMV cap must be non-negative")
    return temperature_at_pmv(params, -c), temperature_at_pmv(params, c)


def baseline_heat_load(params: BuildingParams, t_in, t_out, dt: float = 1.0, t_in_prev=None):
    """Heat input (kW) holding the indoor temperature at ``t_in``.

    First-order envelope model: conduction ``K F (t_in - t_out)`` plus the
    energy needed to move the indoor air from ``t_in_prev`` to ``t_in`` over
    ``dt`` hours.  Without ``t_in_prev`` the steady state is returned.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t_in = np.asarray(t_in, dtype=float)
    t_out = np.asarray(t_out, dtype=float)
    load = params.kf_kw * (t_in - t_out)
    if t_in_prev is not None:
        load = load + params.capacity_kwh * (t_in - np.asarray(t_in_prev, dtype=float)) / dt
    return float(load) if load.ndim == 0 else load


@dataclass(frozen=True)
class BaselineProfile:
    p0: np.ndarray
    h0: np.ndarray
    t_out: np.ndarray
    tsl_min: np.ndarray
    tsl_max: np.ndarray
    il_max: np.ndarray
    h_min: np.ndarray

    def __post_init__(self):
        for name in ("p0", "h0", "t_out", "tsl_min", "tsl_max", "il_max", "h_min"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (T,):
                raise ValueError(f"{name} must have {T} hourly values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.p0 < 0) or np.any(self.h0 < 0):
            raise ValueError("baseline loads must be non-negative")
        if np.any(self.tsl_min > 0) or np.any(self.tsl_max < 0):
            raise ValueError("shiftable bounds must bracket zero")
        if np.any(self.il_max < 0) or np.any(self.il_max > self.p0):
            raise ValueError("interruptible cap must lie in [0, p0]")
        if np.any(self.h_min < 0) or np.any(self.h_min > self.h0 + 1e-9):
            raise ValueError("minimum heat load must lie in [0, h0]")

    @property
    def ch_max(self) -> np.ndarray:
        return np.maximum(self.h0 - self.h_min, 0.0)

    def without_flexibility(self) -> "BaselineProfile":
        z = np.zeros(T)
        return BaselineProfile(self.p0, self.h0, self.t_out, z, z, z, self.h0)


def make_baseline(params: BuildingParams, p0, t_out, setpoint=20.0, flex_share: float = 0.1,
                  heat_flexible: bool = True) -> BaselineProfile:
    """Baseline from hourly electric load, outdoor temperature and set-point.

    Shiftable and interruptible caps are ``flex_share`` of the hourly
    electric load.  The minimum heat load is the steady-state load at the
    lower edge of the hour's comfort band.
    """
    p0 = np.asarray(p0, dtype=float)
    t_out = np.asarray(t_out, dtype=float)
    setpoint = np.broadcast_to(np.asarray(setpoint, dtype=float), (T,))
    h0 = baseline_heat_load(params, setpoint, t_out)
    t_low = np.array([comfort_band(params, h)[0] for h in range(1, T + 1)])
    if np.any(setpoint < t_low - 1e-12):
        raise ValueError("set-point below the comfort band")
    h_min = baseline_heat_load(params, t_low, t_out) if heat_flexible else h0
    h_min = np.clip(h_min, 0.0, h0)
    flex = flex_share * p0
    return BaselineProfile(p0, h0, t_out, -flex, flex, flex, h_min)


@dataclass(frozen=True)
class DemandResponse:
    tsl: np.ndarray
    il: np.ndarray
    ch: np.ndarray

    def __post_init__(self):
        for name in ("tsl", "il", "ch"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls) -> "DemandResponse":
        return cls(np.zeros(T), np.zeros(T), np.zeros(T))

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("tsl", "il", "ch")}

    @classmethod
    def from_dict(cls, d) -> "DemandResponse":
        return cls(np.array(d["tsl"]), np.array(d["il"]), np.array(d["ch"]))


def _scale(base: BaselineProfile) -> float:
    return max(1.0, float(np.maximum(np.abs(base.tsl_min), np.abs(base.tsl_max)).sum()))


def validate_dr(base: BaselineProfile, dr: DemandResponse, tol: float = 1e-9) -> list[Violation]:
    if dr.tsl.shape != (T,) or dr.il.shape != (T,) or dr.ch.shape != (T,):
        raise ValueError("demand response must have hourly arrays")
    out = []
    atol = tol * max(1.0, float(np.abs(base.p0).max()), float(np.abs(base.h0).max()))
    for t in range(T):
        h = t + 1
        if dr.tsl[t] < base.tsl_min[t] - atol or dr.tsl[t] > base.tsl_max[t] + atol:
            out.append(Violation("tsl_bounds", h, f"shiftable {dr.tsl[t]:.6g} outside "
                                 f"[{base.tsl_min[t]:.6g}, {base.tsl_max[t]:.6g}]"))
        if dr.il[t] < -atol or dr.il[t] > base.il_max[t] + atol:
            out.append(Violation("il_bounds", h, f"interruptible {dr.il[t]:.6g} outside [0, {base.il_max[t]:.6g}]"))
        cap = base.h0[t] - base.h_min[t]
        if dr.ch[t] < -atol or dr.ch[t] > cap + atol:
            out.append(Violation("heat_cut_bounds", h, f"heat cut {dr.ch[t]:.6g} outside [0, {cap:.6g}]"))
    total = float(dr.tsl.sum())
    if abs(total) > tol * _scale(base):
        out.append(Violation("tsl_sum", None, f"shifted load sums to {total:.6g}, not 0", total))
    return out


def effective_loads(base: BaselineProfile, dr: DemandResponse) -> tuple[np.ndarray, np.ndarray]:
    """Electric and heat load after the response (kW per hour)."""
    bad = validate_dr(base, dr)
    p = base.p0 + dr.tsl - dr.il
    h = base.h0 - dr.ch
    for t in range(T):
        if p[t] < -1e-9:
            bad.append(Violation("electric_load", t + 1, f"negative electric load {p[t]:.6g}"))
        if h[t] < -1e-9:
            bad.append(Violation("heat_load", t + 1, f"negative heat load {h[t]:.6g}"))
    if bad:
        raise DemandResponseError(bad)
    return p, h
