"""Supply-side device models: EB, CHP, MT, storage and district heating pipes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .building import Violation

T = 24


@dataclass(frozen=True)
class ElectricBoiler:
    eta: float = 0.95
    p_max: float = 600.0

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("boiler efficiency must be in (0, 1]")
        if not self.p_max > 0:
            raise ValueError("boiler capacity must be positive")

    @property
    def h_max(self) -> float:
        return self.eta * self.p_max


def eb_heat(eb: ElectricBoiler, p_in):
    p = np.asarray(p_in, dtype=float)
    if np.any(p < 0) or np.any(p > eb.p_max):
        raise ValueError(f"boiler input must lie in [0, {eb.p_max}] kW")
    h = eb.eta * p
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class CHPUnit:
    c_v: float = 0.75
    p_min: float = 0.0
    p_max: float = 1200.0
    h_max: float = 1200.0
    ramp_down: float = -250.0
    ramp_up: float = 250.0

    def __post_init__(self):
        if self.p_min > self.p_max or self.p_min < 0:
            raise ValueError("CHP needs 0 <= p_min <= p_max")
        if self.h_max < 0:
            raise ValueError("CHP heat capacity must be non-negative")
        if not self.ramp_down <= 0 <= self.ramp_up:
            raise ValueError("CHP ramps need ramp_down <= 0 <= ramp_up")


def chp_validate(chp: CHPUnit, p, h, tol: float = 1e-6) -> tuple[np.ndarray, list[Violation]]:
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if p.shape != h.shape:
        raise ValueError("power and heat series differ in length")
    p_zs = p + chp.c_v * h
    out = []
    for t in range(len(p)):
        if p[t] < chp.p_min - tol or p[t] > chp.p_max + tol:
            out.append(Violation("chp_power", t + 1, f"CHP power {p[t]:.6g} outside [{chp.p_min}, {chp.p_max}]"))
        if h[t] < -tol or h[t] > chp.h_max + tol:
            out.append(Violation("chp_heat", t + 1, f"CHP heat {h[t]:.6g} outside [0, {chp.h_max}]"))
        if t > 0:
            step = p[t] - p[t - 1]
            if step < chp.ramp_down - tol or step > chp.ramp_up + tol:
                out.append(Violation("chp_ramp", t + 1, f"CHP ramp {step:.6g} outside "
                                     f"[{chp.ramp_down}, {chp.ramp_up}]"))
    return p_zs, out


@dataclass(frozen=True)
class MicroTurbine:
    p_min: float = 50.0
    p_max: float = 500.0
    ramp_down: float = -200.0
    ramp_up: float = 200.0

    def __post_init__(self):
        if not 0 < self.p_min <= self.p_max:
            raise ValueError("MT needs 0 < p_min <= p_max")
        if not self.ramp_down <= 0 <= self.ramp_up:
            raise ValueError("MT ramps need ramp_down <= 0 <= ramp_up")


def mt_validate(mt: MicroTurbine, p, psi, tol: float = 1e-6) -> list[Violation]:
    """Check output bounds and ramps of a micro-turbine schedule.

    Ramps bind only in hours with the unit on; a start ramps from zero.  A
    shutdown (1 -> 0) is allowed when the previous output is within the
    ramp-down magnitude.
    """
    p = np.asarray(p, dtype=float)
    psi = np.asarray(psi)
    if p.shape != psi.shape:
        raise ValueError("power and state series differ in length")
    out = []
    prev_p, prev_on = 0.0, 0
    for t in range(len(p)):
        on = int(psi[t])
        if on not in (0, 1):
            out.append(Violation("mt_power", t + 1, f"state {psi[t]!r} is not binary"))
            continue
        if on:
            if p[t] < mt.p_min - tol or p[t] > mt.p_max + tol:
                out.append(Violation("mt_power", t + 1, f"MT power {p[t]:.6g} outside [{mt.p_min}, {mt.p_max}]"))
            step = p[t] - prev_p
            if step < mt.ramp_down - tol or step > mt.ramp_up + tol:
                out.append(Violation("mt_ramp", t + 1, f"MT ramp {step:.6g} outside [{mt.ramp_down}, {mt.ramp_up}]"))
        else:
            if abs(p[t]) > tol:
                out.append(Violation("mt_power", t + 1, f"MT off but producing {p[t]:.6g}"))
            if prev_on and prev_p > -mt.ramp_down + tol:
                out.append(Violation("mt_ramp", t + 1, f"MT shut down from {prev_p:.6g} kW"))
        prev_p, prev_on = (p[t] if on else 0.0), on
    return out


@dataclass(frozen=True)
class StorageDevice:
    kind: str
    c_min: float
    c_max: float
    c_init: float
    p_ch_max: float
    p_dc_max: float
    eta_ch: float = 0.9
    eta_dc: float = 0.9
    k_loss: float = 0.0

    def __post_init__(self):
        if self.kind not in ("EES", "HST"):
            raise ValueError("storage kind must be EES or HST")
        if not self.c_min <= self.c_init <= self.c_max:
            raise ValueError("storage needs c_min <= c_init <= c_max")
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dc <= 1):
            raise ValueError("storage efficiencies must be in (0, 1]")
        if not 0 <= self.k_loss < 1:
            raise ValueError("self-discharge must be in [0, 1)")
        if self.p_ch_max < 0 or self.p_dc_max < 0:
            raise ValueError("storage power limits must be non-negative")


def storage_step(s: StorageDevice, c_t: float, p_ch: float, p_dc: float, dt: float = 1.0) -> float:
    if p_ch < 0 or p_ch > s.p_ch_max or p_dc < 0 or p_dc > s.p_dc_max:
        raise ValueError("storage flow outside its power limits")
    return (1.0 - s.k_loss) * c_t + (s.eta_ch * p_ch - p_dc / s.eta_dc) * dt


def storage_trajectory(s: StorageDevice, p_ch, p_dc, dt: float = 1.0) -> np.ndarray:
    """Stored energy at the start of each hour and after the last, length T+1."""
    p_ch = np.asarray(p_ch, dtype=float)
    p_dc = np.asarray(p_dc, dtype=float)
    c = np.empty(len(p_ch) + 1)
    c[0] = s.c_init
    for t in range(len(p_ch)):
        c[t + 1] = (1.0 - s.k_loss) * c[t] + (s.eta_ch * p_ch[t] - p_dc[t] / s.eta_dc) * dt
    return c


def storage_validate(s: StorageDevice, p_ch, p_dc, dt: float = 1.0, end_rule: str = "cyclic",
                     tol: float = 1e-6) -> list[Violation]:
    """Power limits, capacity band and end-of-day condition.

    ``end_rule="cyclic"`` requires the day to end at the initial energy;
    ``"pinned"`` additionally requires the initial energy to equal c_min.
    """
    if end_rule not in ("cyclic", "pinned"):
        raise ValueError("end_rule must be 'cyclic' or 'pinned'")
    p_ch = np.asarray(p_ch, dtype=float)
    p_dc = np.asarray(p_dc, dtype=float)
    out = []
    for t in range(len(p_ch)):
        if p_ch[t] < -tol or p_ch[t] > s.p_ch_max + tol or p_dc[t] < -tol or p_dc[t] > s.p_dc_max + tol:
            out.append(Violation("storage_flow", t + 1, f"{s.kind} flows ch={p_ch[t]:.6g} dc={p_dc[t]:.6g} out of range"))
    c = storage_trajectory(s, p_ch, p_dc, dt)
    for t in range(1, len(c)):
        if c[t] < s.c_min - tol or c[t] > s.c_max + tol:
            out.append(Violation("storage_energy", t, f"{s.kind} energy {c[t]:.6g} outside [{s.c_min}, {s.c_max}]"))
    if abs(c[-1] - c[0]) > tol:
        out.append(Violation("storage_cycle", len(p_ch), f"{s.kind} ends at {c[-1]:.6g}, started at {c[0]:.6g}",
                             c[-1] - c[0]))
    if end_rule == "pinned" and abs(s.c_init - s.c_min) > tol:
        out.append(Violation("storage_cycle", None, f"{s.kind} initial energy {s.c_init} differs from c_min {s.c_min}"))
    return out


def storage_schedule(s: StorageDevice, price, om: float = 0.0, dt: float = 1.0,
                     dc_cap=None) -> tuple[np.ndarray, np.ndarray]:
    """Arbitrage schedule against an hourly value signal.

    Maximizes sum(price * (dc - ch)) - om * sum(ch + dc) subject to the power
    limits, the capacity band and a cyclic end condition.  ``dc_cap``
    optionally lowers the discharge limit hour by hour.  Returns (ch, dc).
    """
    price = np.asarray(price, dtype=float)
    n = len(price)
    a = 1.0 - s.k_loss
    # variables: ch[0..n), dc[0..n), c[1..n]
    nv = 3 * n
    cost = np.concatenate([price + om, -price + om, np.zeros(n)])
    a_eq = np.zeros((n + 1, nv))
    b_eq = np.zeros(n + 1)
    for t in range(n):
        a_eq[t, 2 * n + t] = 1.0
        if t > 0:
            a_eq[t, 2 * n + t - 1] = -a
        else:
            b_eq[t] = a * s.c_init
        a_eq[t, t] = -s.eta_ch * dt
        a_eq[t, n + t] = dt / s.eta_dc
    a_eq[n, 3 * n - 1] = 1.0
    b_eq[n] = s.c_init
    dc_hi = np.full(n, s.p_dc_max) if dc_cap is None else np.clip(np.asarray(dc_cap, float), 0.0, s.p_dc_max)
    bounds = [(0.0, s.p_ch_max)] * n + [(0.0, float(u)) for u in dc_hi] + [(s.c_min, s.c_max)] * n
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise ValueError(f"{s.kind} schedule infeasible: {res.message}")
    ch = np.clip(res.x[:n], 0.0, s.p_ch_max)
    dc = np.clip(res.x[n:2 * n], 0.0, dc_hi)
    both = np.minimum(ch, dc)
    if np.any(both > 1e-9):
        raise ValueError(f"{s.kind} schedule charges and discharges in the same hour")
    return ch, dc


@dataclass(frozen=True)
class HeatPipe:
    """Supply pipe with length (m), inner diameter (m), mass flow (kg/s),
    heat transfer per length lam (W/(m degC)), fluid heat capacity c_pipe
    (MJ/(kg degC)) and water density rho_w (kg/m3)."""

    name: str
    length: float
    diameter: float
    flow: float
    lam: float = 0.2
    c_pipe: float = 4.2e-3
    rho_w: float = 1000.0

    def __post_init__(self):
        for f in ("length", "diameter", "flow", "lam", "c_pipe", "rho_w"):
            if not getattr(self, f) > 0:
                raise ValueError(f"pipe {f} must be positive")

    @property
    def c_pipe_j(self) -> float:
        return self.c_pipe * 1e6


def pipe_loss(pipe: HeatPipe, t_start, t_out):
    """Return (k_loss, temperature drop degC, heat loss kW)."""
    k = -math.expm1(-pipe.lam * pipe.length / (pipe.c_pipe_j * pipe.flow))
    dtemp = k * (np.asarray(t_start, dtype=float) - np.asarray(t_out, dtype=float))
    dh = pipe.c_pipe_j * pipe.flow * dtemp / 1000.0
    if dtemp.ndim == 0:
        return k, float(dtemp), float(dh)
    return k, dtemp, dh


def pipe_delay_seconds(pipe: HeatPipe) -> float:
    return math.pi * pipe.rho_w * pipe.length * pipe.diameter ** 2 / (4.0 * pipe.flow)


def pipe_delay(pipe: HeatPipe, dt: float = 1.0) -> int:
    """Transport delay in whole periods of ``dt`` hours (half rounds up)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return int(math.floor(pipe_delay_seconds(pipe) / (dt * 3600.0) + 0.5))
