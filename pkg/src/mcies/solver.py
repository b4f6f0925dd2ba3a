"""Distributed leader-follower solver.

The leader's 48 prices are searched with a chaotic differential evolution.
Every candidate is broadcast to the buildings, whose convex responses come
back from a separable QP, and the resulting loads are dispatched in every
renewable scenario.  Only prices travel down and loads travel up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .building import DemandResponse
from .devices import storage_schedule
from .market import PriceSchedule, ScenarioDispatch, cies_demand, delayed_heat_demand

T = 24
FAILED_FITNESS = -1e15


# ---------------------------------------------------------------------------
# follower problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QPProblem:
    """One building's response problem at fixed prices.

    Minimizes sum_t mu*(p0 + tsl - il) + gamma*(h0 - ch)
    + omega*tsl^2 + vartheta*il^2 + theta*ch^2 over the hourly boxes with
    sum_t tsl = 0.  Constant bill terms do not move the optimum.
    """

    mu: np.ndarray
    gamma: np.ndarray
    omega: float
    vartheta: float
    theta: float
    tsl_lo: np.ndarray
    tsl_hi: np.ndarray
    il_max: np.ndarray
    ch_max: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.mu))
        for name in ("mu", "gamma", "tsl_lo", "tsl_hi", "il_max", "ch_max"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (n,):
                raise ValueError(f"{name} must have one value per hour")
            object.__setattr__(self, name, a)
        if min(self.omega, self.vartheta, self.theta) <= 0:
            raise ValueError("follower problem is not strictly convex")
        if np.any(self.tsl_lo > self.tsl_hi) or np.any(self.il_max < 0) or np.any(self.ch_max < 0):
            raise ValueError("empty box")
        if self.tsl_lo.sum() > 0 or self.tsl_hi.sum() < 0:
            raise ValueError("shiftable boxes cannot sum to zero")

    @classmethod
    def from_building(cls, prices: PriceSchedule, building) -> "QPProblem":
        p, b = building.params, building.base
        return cls(prices.mu_sell, prices.gamma_sell, p.omega, p.vartheta, p.theta,
                   b.tsl_min, b.tsl_max, b.il_max, b.ch_max)

    def objective(self, tsl, il, ch) -> float:
        """Response-dependent part of the follower cost."""
        return float((self.mu * (tsl - il) - self.gamma * ch + self.omega * tsl ** 2
                      + self.vartheta * il ** 2 + self.theta * ch ** 2).sum())


@dataclass(frozen=True)
class QPInfo:
    nu: float
    kkt: float


def _tsl_at(nu, mu, a, lo, hi):
    return np.clip(-(mu + nu[..., None]) / a, lo, hi)


def _active_set_nu(nu, mu, a, lo, hi):
    """Multiplier that zeroes the shifted sum on the free set implied by ``nu``."""
    raw = -(mu + nu[..., None]) / a
    free = (raw > lo) & (raw < hi)
    fixed = np.where(free, 0.0, np.clip(raw, lo, hi)).sum(-1)
    inv = np.where(free, 1.0 / a, 0.0).sum(-1)
    num = -np.where(free, mu / a, 0.0).sum(-1) - fixed
    has = inv > 0
    return np.where(has, num / np.where(has, inv, 1.0), nu)


def _solve_tsl(mu, a, lo, hi, nu0=None, iters: int = 200):
    """Dual bisection on the coupling multiplier, then an exact active-set finish.

    Arrays broadcast to (..., T); returns (tsl, nu) with nu of shape (...).
    """
    shape = np.broadcast_shapes(mu.shape, a.shape, lo.shape, hi.shape)
    mu, a, lo, hi = (np.broadcast_to(x, shape) for x in (mu, a, lo, hi))
    nu_lo = (-mu - a * hi).min(-1)
    nu_hi = (-mu - a * lo).max(-1)
    scale = np.maximum(np.maximum(np.abs(lo), np.abs(hi)).sum(-1), 1.0)
    best = None
    if nu0 is not None:
        nu = np.clip(np.broadcast_to(np.asarray(nu0, dtype=float), shape[:-1]), nu_lo, nu_hi)
        for _ in range(8):
            nu = _active_set_nu(nu, mu, a, lo, hi)
        best = nu
        if np.all(np.abs(_tsl_at(nu, mu, a, lo, hi).sum(-1)) <= 1e-12 * scale):
            return _tsl_at(nu, mu, a, lo, hi), nu
    l, h = nu_lo.copy(), nu_hi.copy()
    for _ in range(iters):
        mid = 0.5 * (l + h)
        s = _tsl_at(mid, mu, a, lo, hi).sum(-1)
        # the shifted sum is nonincreasing in nu
        l = np.where(s > 0, mid, l)
        h = np.where(s > 0, h, mid)
        if np.all(h - l <= 1e-15 * np.maximum(1.0, np.abs(l))):
            break
    nu = 0.5 * (l + h)
    err = np.abs(_tsl_at(nu, mu, a, lo, hi).sum(-1))
    for _ in range(3):
        cand = _active_set_nu(nu, mu, a, lo, hi)
        cerr = np.abs(_tsl_at(cand, mu, a, lo, hi).sum(-1))
        take = cerr <= err
        nu = np.where(take, cand, nu)
        err = np.where(take, cerr, err)
    if best is not None:
        berr = np.abs(_tsl_at(best, mu, a, lo, hi).sum(-1))
        nu = np.where(berr < err, best, nu)
    return _tsl_at(nu, mu, a, lo, hi), nu


def solve_followers(mu, gamma, omega, vartheta, theta, lo, hi, il_max, ch_max, nu0=None):
    """Batch best responses.

    ``mu``/``gamma`` are (n, T); building coefficients are (I,) and boxes
    (I, T).  Returns tsl, il, ch of shape (n, I, T) and nu of shape (n, I).
    """
    mu = np.asarray(mu, dtype=float)[:, None, :]
    gamma = np.asarray(gamma, dtype=float)[:, None, :]
    omega = np.asarray(omega, dtype=float)[None, :, None]
    vartheta = np.asarray(vartheta, dtype=float)[None, :, None]
    theta = np.asarray(theta, dtype=float)[None, :, None]
    il = np.clip(mu / (2.0 * vartheta), 0.0, il_max)
    ch = np.clip(gamma / (2.0 * theta), 0.0, ch_max)
    tsl, nu = _solve_tsl(mu, 2.0 * omega, lo[None], hi[None], nu0)
    return tsl, il, ch, nu


def kkt_residual(problem: QPProblem, dr: DemandResponse, nu: float) -> float:
    """Largest projected-gradient violation of the optimality conditions."""
    p = problem
    g = p.mu + nu + 2 * p.omega * dr.tsl
    r_tsl = np.abs(dr.tsl - np.clip(dr.tsl - g, p.tsl_lo, p.tsl_hi))
    g = -p.mu + 2 * p.vartheta * dr.il
    r_il = np.abs(dr.il - np.clip(dr.il - g, 0.0, p.il_max))
    g = -p.gamma + 2 * p.theta * dr.ch
    r_ch = np.abs(dr.ch - np.clip(dr.ch - g, 0.0, p.ch_max))
    return float(max(r_tsl.max(), r_il.max(), r_ch.max(), abs(dr.tsl.sum())))


def follower_qp_solve(problem: QPProblem, nu0: float | None = None) -> tuple[DemandResponse, QPInfo]:
    p = problem
    tsl, il, ch, nu = solve_followers(p.mu[None], p.gamma[None], [p.omega], [p.vartheta], [p.theta],
                                      p.tsl_lo[None], p.tsl_hi[None], p.il_max[None], p.ch_max[None],
                                      None if nu0 is None else np.array([[nu0]]))
    dr = DemandResponse(tsl[0, 0], il[0, 0], ch[0, 0])
    nu = float(nu[0, 0])
    return dr, QPInfo(nu, kkt_residual(p, dr, nu))


# ---------------------------------------------------------------------------
# scenario dispatch
# ---------------------------------------------------------------------------


def _shutdown_caps(psi: np.ndarray, p_max: float, ramp_down: float) -> np.ndarray:
    """Upper output bound that still lets the unit ramp down before each shutdown."""
    caps = np.full(psi.shape, p_max, dtype=float)
    step = -ramp_down
    for j in range(psi.shape[0]):
        run = None
        for t in range(psi.shape[1] - 1, -1, -1):
            if not psi[j, t]:
                run = 0
                continue
            if run is not None:
                run += 1
                caps[j, t] = min(p_max, step * run)
    return caps


class Dispatcher:
    """Vectorized second-stage dispatch of a system over a scenario set.

    Load-independent parts (storage schedules, MT commitment, pipe delay and
    loss, renewable availability) are fixed at construction.  ``run`` takes
    per-building loads for a batch of price candidates and dispatches every
    (candidate, scenario) pair at once.
    """

    def __init__(self, system, scenarios):
        self.system = s = system
        self.probs = np.asarray(scenarios.probabilities, dtype=float)
        J = s.n_cies
        self.J = J
        wt_cap = np.array([c.wt_capacity for c in s.cies])
        pv_cap = np.array([c.pv_capacity for c in s.cies])
        self.wt = scenarios.wt_matrix()[:, None, :] * wt_cap[None, :, None]
        self.pv = scenarios.pv_matrix()[:, None, :] * pv_cap[None, :, None]
        self.ren = self.wt + self.pv
        self.delays = s.delays()
        self.losses = s.pipe_losses()
        self.bc = s.building_cies
        tr = s.tariff
        self.p_buy, self.p_sell = tr.p_buy, tr.p_sell
        co = s.costs
        self.om = {k: co.beta(k) for k in ("WT", "PV", "CHP", "MT", "EB", "EES", "HST")}

        h_floor = delayed_heat_demand([b.base.h_min for b in s.buildings], self.losses, self.delays, self.bc, J)
        shape = (J, T)
        self.ees_ch, self.ees_dc = np.zeros(shape), np.zeros(shape)
        self.hst_ch, self.hst_dc = np.zeros(shape), np.zeros(shape)
        for j, c in enumerate(s.cies):
            ees, hst = c.ees, c.hst
            if s.storage_end_rule == "pinned":
                ees = _pinned(ees)
                hst = _pinned(hst)
            self.ees_ch[j], self.ees_dc[j] = storage_schedule(ees, tr.p_buy, self.om["EES"])
            self.hst_ch[j], self.hst_dc[j] = storage_schedule(
                hst, tr.p_buy / c.eb.eta, self.om["HST"], dc_cap=h_floor[j])

        # commit the MT where its output at p_min is worth more than it costs
        # and the expected baseline demand left after renewables and the CHP
        # (loaded up to the MT's marginal cost) can absorb it
        p_base = cies_demand([b.base.p0 for b in s.buildings], self.bc, J) + self.ees_ch - self.ees_dc
        residual = p_base - np.tensordot(self.probs, self.ren, axes=1)
        m_thr = co.mt_b + self.om["MT"]
        self.psi = np.zeros(shape, dtype=int)
        for j, c in enumerate(s.cies):
            fuel = co.mt_a + m_thr * c.mt.p_min
            c_k = np.clip((m_thr - co.chp_b - self.om["CHP"]) / (2.0 * co.chp_a), c.chp.p_min, c.chp.p_max)
            self.psi[j] = ((tr.p_buy * c.mt.p_min > fuel) & (residual[j] - c_k >= c.mt.p_min)).astype(int)
        self.mt_cap = np.stack([_shutdown_caps(self.psi[j:j + 1], c.mt.p_max, c.mt.ramp_down)[0]
                                for j, c in enumerate(s.cies)])

        self.chp_hmax = np.array([c.chp.h_max for c in s.cies])[:, None]
        self.eb_hmax = np.array([c.eb.h_max for c in s.cies])[:, None]
        self.eb_eta = np.array([c.eb.eta for c in s.cies])[:, None]

    # -- heat -------------------------------------------------------------

    def heat_stage(self, h_loads: np.ndarray, ties: bool = True) -> dict:
        """Heat dispatch for loads (n, I, T); results are (n, J, T)."""
        s = self.system
        n = h_loads.shape[0]
        demand = np.zeros((n, self.J, T))
        for i, j in enumerate(self.bc):
            demand[:, j] += np.roll(h_loads[:, i] + self.losses[i], -int(self.delays[i]), axis=-1)
        need = demand + self.hst_ch - self.hst_dc
        tie = np.zeros((n, self.J, T))
        if ties and self.J == 2 and s.tie_h_cap > 0:
            tie = self._heat_ties(need)
        net = need - tie
        chp_h = np.minimum(net, self.chp_hmax)
        rest = net - chp_h
        eb_h = np.minimum(rest, self.eb_hmax)
        return {"demand": demand, "chp_h": chp_h, "eb_h": eb_h, "eb_p": eb_h / self.eb_eta,
                "unmet_h": rest - eb_h, "tie_h": tie}

    def _heat_ties(self, need: np.ndarray) -> np.ndarray:
        s = self.system
        co = s.costs
        cap = s.tie_h_cap
        chp_h = np.minimum(need, self.chp_hmax)
        short = need - chp_h                     # EB heat plus anything unserved
        spare = self.chp_hmax - chp_h
        eb_val = (self.p_buy + self.om["EB"]) / self.eb_eta
        flows = []
        for r, d in ((0, 1), (1, 0)):
            econ = (eb_val[r] - co.chp_e - self.om["CHP"]) / (2.0 * co.chp_d) - chp_h[:, d]
            unserved = np.maximum(short[:, r] - self.eb_hmax[r], 0.0)
            y = np.minimum(np.minimum(short[:, r], spare[:, d]), cap)
            flows.append(np.clip(np.minimum(y, np.maximum(econ, unserved)), 0.0, None))
        into0, into1 = flows
        idle = (into0 == 0) & (into1 == 0) & (short[:, 0] == 0) & (short[:, 1] == 0)
        # returns move heat between two CHP units; cheapest where the sender is least loaded
        ret_cost = 2.0 * co.chp_d * (chp_h[:, 0] - chp_h[:, 1])
        cap_to1 = np.where(idle, np.minimum(np.minimum(spare[:, 0], chp_h[:, 1]), cap), 0.0)
        cap_to0 = np.where(idle, np.minimum(np.minimum(spare[:, 1], chp_h[:, 0]), cap), 0.0)
        f = _balance_daily(into0, into1, cap_to1, cap_to0, ret_cost, -ret_cost)
        return np.stack([f, -f], axis=1)

    # -- electricity --------------------------------------------------------

    def _electric_pass(self, net: np.ndarray, chp_h: np.ndarray, ren: np.ndarray):
        """Sequential merit-order pass over the day, batched over (n, S, J)."""
        s = self.system
        co = s.costs
        batch = net.shape[:-1]
        out = {k: np.zeros(net.shape) for k in ("chp_p", "mt_p", "buy", "sell", "curtail", "unmet", "g_des")}
        chp = [c.chp for c in s.cies]
        mt = [c.mt for c in s.cies]
        c_min = np.array([u.p_min for u in chp])
        c_max = np.array([u.p_max for u in chp])
        c_rd = np.array([u.ramp_down for u in chp])
        c_ru = np.array([u.ramp_up for u in chp])
        m_min = np.array([u.p_min for u in mt])
        m_max = np.array([u.p_max for u in mt])
        m_rd = np.array([u.ramp_down for u in mt])
        m_ru = np.array([u.ramp_up for u in mt])
        b_chp = co.chp_b + self.om["CHP"]
        m_thr = co.mt_b + self.om["MT"]
        gcap = s.grid_cap
        prev_c = np.zeros(batch)
        prev_m = np.zeros(batch)
        for t in range(T):
            if t == 0:
                lo_c = np.broadcast_to(c_min, batch)
                hi_c = np.broadcast_to(c_max, batch)
            else:
                lo_c = np.maximum(c_min, prev_c + c_rd)
                hi_c = np.minimum(c_max, prev_c + c_ru)
            h = chp_h[..., t]

            def chp_at(lam):
                return np.clip((lam - b_chp - co.chp_f * h) / (2.0 * co.chp_a), lo_c, hi_c)

            on = self.psi[:, t].astype(bool)
            was_on = self.psi[:, t - 1].astype(bool) if t > 0 else np.zeros(self.J, dtype=bool)
            base_m = np.where(was_on, prev_m, 0.0)
            lo_m = np.where(on, np.maximum(m_min, base_m + m_rd), 0.0)
            hi_m = np.where(on, np.minimum(np.minimum(m_max, base_m + m_ru), self.mt_cap[:, t]), 0.0)

            def mt_at(lam):
                return hi_m if lam > m_thr else lo_m

            pb, ps = self.p_buy[t], self.p_sell[t]
            cb, mb = chp_at(pb), mt_at(pb)
            # without a heat duty the unit's running cost is not worth an export
            cs, ms = np.where(h > 0, chp_at(ps), lo_c), mt_at(ps)
            x = net[..., t]
            buying = x >= cb + mb
            selling = ~buying & (x <= cs + ms)
            mid = ~buying & ~selling
            c_k = chp_at(m_thr)
            lo_mb = np.broadcast_to(lo_m, batch)
            hi_mb = np.broadcast_to(hi_m, batch)
            case_a = x - lo_mb <= c_k
            case_b = x - hi_mb >= c_k
            c_mid = np.where(case_a, x - lo_mb, np.where(case_b, x - hi_mb, c_k))
            m_mid = x - c_mid
            c_t = np.where(buying, cb, np.where(selling, cs, c_mid))
            m_t = np.where(buying, mb, np.where(selling, ms, m_mid))
            g = x - c_t - m_t
            out["g_des"][..., t] = g
            buy = np.maximum(g, 0.0)
            sell = np.maximum(-g, 0.0)
            unmet = np.maximum(buy - gcap, 0.0)
            buy = buy - unmet
            excess = np.maximum(sell - gcap, 0.0)
            # surplus beyond the export limit: back generation off, then curtail
            cut_c = np.minimum(excess, c_t - lo_c)
            c_t = c_t - cut_c
            excess = excess - cut_c
            cut_m = np.minimum(excess, m_t - lo_mb)
            m_t = m_t - cut_m
            excess = excess - cut_m
            curt = np.minimum(excess, ren[..., t])
            excess = excess - curt
            sell = sell - cut_c - cut_m - curt - excess
            out["chp_p"][..., t] = c_t
            out["mt_p"][..., t] = m_t
            out["buy"][..., t] = buy
            out["sell"][..., t] = sell
            out["curtail"][..., t] = curt
            out["unmet"][..., t] = unmet - excess
            prev_c = c_t
            prev_m = m_t
        return out

    def electric_stage(self, p_demand: np.ndarray, heat: dict) -> dict:
        """Electric dispatch for CIES demand (n, J, T); results are (n, S, J, T)."""
        s = self.system
        base = (p_demand + heat["eb_p"] + self.ees_ch - self.ees_dc)[:, None] - self.ren[None]
        chp_h = np.broadcast_to(heat["chp_h"][:, None], base.shape)
        first = self._electric_pass(base, chp_h, self.ren[None])
        first["tie_p"] = np.zeros(base.shape)
        if self.J < 2 or s.tie_p_cap == 0:
            return first
        tie = self._electric_ties(first["g_des"])
        out = self._electric_pass(base - tie, chp_h, self.ren[None])
        out["tie_p"] = tie
        # the tie schedule is a heuristic; keep it only where it pays
        keep = self._value({"heat": heat, "elec": out}) > self._value({"heat": heat, "elec": first})
        return _select(keep, out, first)

    def _electric_ties(self, g: np.ndarray) -> np.ndarray:
        s = self.system
        cap, gcap = s.tie_p_cap, s.grid_cap
        g0, g1 = g[..., 0, :], g[..., 1, :]
        into0 = np.where((g0 > 0) & (g1 < 0), np.minimum(np.minimum(g0, -g1), cap), 0.0)
        into1 = np.where((g0 < 0) & (g1 > 0), np.minimum(np.minimum(-g0, g1), cap), 0.0)
        imp = (g0 >= 0) & (g1 >= 0)
        exp = (g0 <= 0) & (g1 <= 0) & ~imp
        lo = np.where(imp, np.maximum(-g1, g0 - gcap), np.where(exp, np.maximum(g0, -gcap - g1), 0.0))
        hi = np.where(imp, np.minimum(g0, gcap - g1), np.where(exp, np.minimum(g0 + gcap, -g1), 0.0))
        lo = np.clip(np.minimum(lo, 0.0), -cap, 0.0)
        hi = np.clip(np.maximum(hi, 0.0), 0.0, cap)
        # same-sign hours move no money; fill them in hour order
        order = np.broadcast_to(np.arange(T, dtype=float), g0.shape)
        f = _balance_daily(into0, into1, -lo, hi, order, order)
        return np.stack([f, -f], axis=-2)

    # -- totals -------------------------------------------------------------

    def run(self, p_loads: np.ndarray, h_loads: np.ndarray) -> dict:
        p_dem = np.zeros((p_loads.shape[0], self.J, T))
        for i, j in enumerate(self.bc):
            p_dem[:, j] += p_loads[:, i]
        heat = self.heat_stage(h_loads, ties=False)
        res = {"heat": heat, "elec": self.electric_stage(p_dem, heat), "p_demand": p_dem}
        if self.J == 2 and self.system.tie_h_cap > 0:
            # heat is committed before the scenario is known: compare expected values
            heat = self.heat_stage(h_loads, ties=True)
            alt = {"heat": heat, "elec": self.electric_stage(p_dem, heat), "p_demand": p_dem}
            keep = self._value(alt) @ self.probs > self._value(res) @ self.probs
            res = _select(keep, alt, res)
        return res

    def _value(self, res: dict) -> np.ndarray:
        grid, cost, pen = self.scenario_values(res)
        return grid - cost - pen

    def scenario_values(self, res: dict):
        """Grid income, operating cost and penalty per (n, S)."""
        s = self.system
        co = s.costs
        heat, elec = res["heat"], res["elec"]
        grid = (self.p_sell * elec["sell"] - self.p_buy * elec["buy"]).sum((-1, -2))
        chp_p = elec["chp_p"]
        chp_h = heat["chp_h"][:, None]
        running = (chp_p > 0) | (chp_h > 0)
        chp_cost = (co.chp_a * chp_p ** 2 + co.chp_b * chp_p + co.chp_d * chp_h ** 2 + co.chp_e * chp_h
                    + co.chp_f * chp_p * chp_h + np.where(running, co.chp_c, 0.0))
        psi = self.psi
        start = np.maximum(psi - np.concatenate([np.full((self.J, 1), s.psi0), psi[:, :-1]], axis=1), 0)
        mt_cost = co.mt_start * start + psi * (co.mt_a + co.mt_b * elec["mt_p"])
        om = self.om
        used = self.ren - elec["curtail"]
        om_cost = (om["WT"] * self.wt * _share(used, self.ren) + om["PV"] * self.pv * _share(used, self.ren)
                   + om["CHP"] * (chp_p + chp_h) + om["MT"] * elec["mt_p"] + om["EB"] * heat["eb_p"][:, None]
                   + om["EES"] * (self.ees_ch + self.ees_dc) + om["HST"] * (self.hst_ch + self.hst_dc))
        cost = (chp_cost + mt_cost + om_cost).sum((-1, -2))
        pen = s.penalty * ((elec["unmet"] ** 2).sum((-1, -2)) + (heat["unmet_h"] ** 2).sum((-1, -2))[:, None])
        return grid, cost, pen

    def dispatches(self, res: dict, k: int = 0) -> list[ScenarioDispatch]:
        """Unpack candidate ``k`` of a batch result into per-scenario records."""
        heat, elec = res["heat"], res["elec"]
        out = []
        used_share = _share(self.ren - elec["curtail"][k], self.ren)
        for si in range(len(self.probs)):
            out.append(ScenarioDispatch(
                wt=self.wt[si] * used_share[si], pv=self.pv[si] * used_share[si],
                chp_p=elec["chp_p"][k, si].copy(), chp_h=heat["chp_h"][k].copy(),
                mt_p=elec["mt_p"][k, si].copy(), mt_on=self.psi.astype(float), eb_p=heat["eb_p"][k].copy(),
                ees_ch=self.ees_ch.copy(), ees_dc=self.ees_dc.copy(), hst_ch=self.hst_ch.copy(),
                hst_dc=self.hst_dc.copy(), grid_buy=elec["buy"][k, si].copy(), grid_sell=elec["sell"][k, si].copy(),
                tie_p=elec["tie_p"][k, si].copy(), tie_h=heat["tie_h"][k].copy(), eb_h=heat["eb_h"][k].copy(),
                curtail=elec["curtail"][k, si].copy(), unmet_e=elec["unmet"][k, si].copy(),
                unmet_h=heat["unmet_h"][k].copy()))
        return out


def scenario_dispatch(system, p_loads, h_loads, scenario) -> ScenarioDispatch:
    """Dispatch one renewable scenario for fixed building loads (I, T).

    Sales income is fixed once the loads are, so the user prices do not
    enter the dispatch."""
    from .scenario import JointScenarioSet
    one = JointScenarioSet.deterministic(scenario.wt, scenario.pv)
    disp = Dispatcher(system, one)
    res = disp.run(np.asarray(p_loads, dtype=float)[None], np.asarray(h_loads, dtype=float)[None])
    return disp.dispatches(res)[0]


def _select(mask, a, b):
    """Pick ``a`` where ``mask`` holds along the leading axes, else ``b``; recurses into dicts."""
    if isinstance(a, dict):
        return {k: _select(mask, a[k], b[k]) for k in a}
    m = mask.reshape(mask.shape + (1,) * (np.ndim(a) - mask.ndim))
    return np.where(m, a, b)


def _share(used, avail):
    return np.divide(used, avail, out=np.ones(np.broadcast_shapes(used.shape, avail.shape)), where=avail > 0)


def _pinned(dev):
    from dataclasses import replace
    return replace(dev, c_init=dev.c_min)


def _fill(need, cap, key):
    """Allocate ``need`` (batch,) over hourly capacity (batch, T) in ascending ``key``."""
    order = np.argsort(key, axis=-1, kind="stable")
    c = np.take_along_axis(cap, order, axis=-1)
    before = np.cumsum(c, axis=-1) - c
    alloc = np.clip(need[..., None] - before, 0.0, c)
    out = np.empty_like(alloc)
    np.put_along_axis(out, order, alloc, axis=-1)
    return out


def _balance_daily(into0, into1, cap_to1, cap_to0, key_to1, key_to0):
    """Signed hourly flow into community 0 with a zero daily sum.

    Forward flows ``into0``/``into1`` are kept where possible; the imbalance
    is returned through spare capacity, and forward flows in the surplus
    direction are scaled down if that capacity runs short.
    """
    p, q = into0.sum(-1), into1.sum(-1)
    r1, r0 = cap_to1.sum(-1), cap_to0.sum(-1)
    more0 = p >= q
    # scale factors for the dominant direction
    a0 = np.where(more0 & (p - q > r1), (q + r1) / np.where(p > 0, p, 1.0), 1.0)
    a1 = np.where(~more0 & (q - p > r0), (p + r0) / np.where(q > 0, q, 1.0), 1.0)
    into0 = into0 * a0[..., None]
    into1 = into1 * a1[..., None]
    need = into0.sum(-1) - into1.sum(-1)
    back1 = _fill(np.maximum(need, 0.0), cap_to1, key_to1)
    back0 = _fill(np.maximum(-need, 0.0), cap_to0, key_to0)
    return into0 - into1 - back1 + back0


# ---------------------------------------------------------------------------
# chaotic differential evolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DEConfig:
    population: int = 50
    f_min: float = 0.4
    f_max: float = 1.0
    cr: float = 0.9
    chaos_r: float = 4.0
    chaos_z0: float = 0.7
    max_iter: int = 200
    seed: int = 0
    penalty: float = 1e3
    polish: bool = True
    polish_polls: int = 60
    plateau: int | None = None

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if not (0 < self.f_min <= self.f_max <= 2):
            raise ValueError("differential weight must lie in (0, 2]")
        if not 0 <= self.cr <= 1:
            raise ValueError("crossover rate must lie in [0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.chaos_z0 < 1 or not 0 < self.chaos_r <= 4:
            raise ValueError("logistic map needs r in (0, 4] and z0 in (0, 1)")


def _logistic(z, r):
    z = r * z * (1.0 - z)
    # keep the orbit off the absorbing and periodic points
    bad = (z <= 1e-12) | (z >= 1 - 1e-12) | np.isin(z, (0.25, 0.5, 0.75))
    return np.where(bad, np.mod(z + 0.1234567, 1.0) * 0.98 + 0.01, z)


@dataclass
class DEResult:
    x: np.ndarray
    fitness: float
    trace: np.ndarray
    trace_x: np.ndarray
    de_fitness: float
    polish_polls: int


def chaotic_de_optimize(objective, bounds, config: DEConfig = DEConfig(), repair=None,
                        blocks=None, x0=None) -> DEResult:
    """Maximize a batch objective over a box.

    ``objective`` maps an (n, dim) array to n fitness values.  ``trace[g]`` is
    the best fitness after generation g (entry 0 is the initial population);
    when polishing is on, one final entry holds the polished value.
    ``blocks`` lists index groups that share a sum constraint; the polish
    then also tries exchange moves within each group.
    """
    lb, ub = (np.asarray(b, dtype=float) for b in bounds)
    if lb.shape != ub.shape or np.any(lb > ub):
        raise ValueError("invalid bounds")
    dim = lb.size
    rng = np.random.default_rng(config.seed)
    np_ = config.population
    fix = (lambda X: X) if repair is None else repair

    def evaluate(X):
        f = np.asarray(objective(X), dtype=float)
        return np.where(np.isfinite(f), f, -np.inf)

    z = rng.uniform(0.05, 0.95, size=dim)
    pop = np.empty((np_, dim))
    for i in range(np_):
        z = _logistic(z, config.chaos_r)
        pop[i] = lb + z * (ub - lb)
    if x0 is not None:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))[:np_]
        pop[:len(x0)] = np.clip(x0, lb, ub)
    pop = fix(pop)
    fit = evaluate(pop)
    zf = np.empty(np_)
    zc = config.chaos_z0
    for i in range(np_):
        zc = float(_logistic(np.array(zc), config.chaos_r))
        zf[i] = zc
    b = int(np.argmax(fit))
    trace, trace_x = [fit[b]], [pop[b].copy()]
    stall = 0
    for _ in range(config.max_iter):
        zf = _logistic(zf, config.chaos_r)
        F = config.f_min + (config.f_max - config.f_min) * zf
        idx = np.empty((np_, 3), dtype=int)
        for i in range(np_):
            r = rng.choice(np_ - 1, 3, replace=False)
            idx[i] = r + (r >= i)
        v = pop[idx[:, 0]] + F[:, None] * (pop[idx[:, 1]] - pop[idx[:, 2]])
        v = np.where(v < lb, 0.5 * (lb + pop), v)
        v = np.where(v > ub, 0.5 * (ub + pop), v)
        cross = rng.random((np_, dim)) < config.cr
        cross[np.arange(np_), rng.integers(dim, size=np_)] = True
        trial = fix(np.where(cross, v, pop))
        ft = evaluate(trial)
        better = ft >= fit
        pop[better] = trial[better]
        fit[better] = ft[better]
        b = int(np.argmax(fit))
        stall = stall + 1 if fit[b] <= trace[-1] else 0
        trace.append(fit[b])
        trace_x.append(pop[b].copy())
        if config.plateau and stall >= config.plateau:
            break
    x, fx = pop[b].copy(), float(fit[b])
    de_fx = fx
    polls = 0
    if config.polish:
        x, fx, polls = _pattern_search(evaluate, x, fx, lb, ub, fix, config.polish_polls, blocks)
        trace.append(fx)
        trace_x.append(x.copy())
    return DEResult(x, fx, np.array(trace), np.array(trace_x), de_fx, polls)


def _pattern_search(evaluate, x, fx, lb, ub, fix, max_polls, blocks=None, pairs: int = 6, rel_tol=1e-9):
    """Compass search from the DE incumbent; every poll is one batch call.

    Besides the +/- coordinate moves, each poll tries exchange moves inside
    each block in ``blocks`` (raise one coordinate, lower another by the same
    step), which stay on a binding sum constraint.  Exchange pairs are picked
    from the coordinates whose single moves looked most promising.
    """
    dim = x.size
    span = np.where(ub > lb, ub - lb, 1.0)
    step = 0.05 * span
    eye = np.eye(dim)
    polls = 0
    while polls < max_polls and np.max(step / span) > rel_tol:
        moves = [eye * step, -eye * step]
        if blocks:
            # raw one-sided probes rank the coordinates for exchanges
            raw = np.clip(np.vstack([x + eye * step, x - eye * step]), lb, ub)
            fr = evaluate(raw)
            up, dn = fr[:dim], fr[dim:]
            for blk in blocks:
                blk = np.asarray(blk)
                ui = blk[np.argsort(-up[blk], kind="stable")[:pairs]]
                di = blk[np.argsort(-dn[blk], kind="stable")[:pairs]]
                ex = [eye[i] * step[i] - eye[j] * step[j] for i in ui for j in di if i != j]
                if ex:
                    moves.append(np.array(ex))
            # line search along the difference gradient, raw and with the
            # block sums held fixed
            g = (up - dn) / (2.0 * step)
            movable = ((x > lb) | (g > 0)) & ((x < ub) | (g < 0))
            g = np.where(movable, g, 0.0)
            proj = g.copy()
            for blk in blocks:
                m = np.asarray(blk)[movable[blk]]
                if m.size:
                    proj[m] -= proj[m].mean()
            lengths = 0.2 * 0.5 ** np.arange(12)
            for d in (g, proj):
                norm = np.max(np.abs(d) / span)
                if norm > 0:
                    moves.append(lengths[:, None] * (d / norm)[None, :])
        cand = fix(np.clip(x + np.vstack(moves), lb, ub))
        f = evaluate(cand)
        polls += 1
        k = int(np.argmax(f))
        if f[k] <= fx:
            step = step * 0.5
            continue
        best_x, best_f = cand[k], f[k]
        c_up, c_dn = f[:dim], f[dim:2 * dim]
        improving = np.maximum(c_up, c_dn) > fx
        if improving.sum() > 1:
            move = np.where(improving, np.where(c_up >= c_dn, step, -step), 0.0)
            comb = fix(np.clip(x + move, lb, ub)[None])
            fc = evaluate(comb)[0]
            if fc > best_f:
                best_x, best_f = comb[0], fc
        x, fx = best_x.copy(), float(best_f)
    return x, fx, polls


# ---------------------------------------------------------------------------
# leader objective and the outer loop
# ---------------------------------------------------------------------------


PRICE_BLOCKS = (np.arange(T), np.arange(T, 2 * T))


def repair_prices(X, tariff) -> np.ndarray:
    """Clip genomes to the hourly boxes, then shrink toward the lower bounds
    until both average caps hold."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = tariff.lower, tariff.upper
    X = np.clip(X, lo, hi)
    out = X.copy()
    for part, cap in ((slice(0, T), T * tariff.mu_av), (slice(T, 2 * T), T * tariff.gamma_av)):
        x, l = X[:, part], lo[part]
        # aim a hair under the cap so summation order cannot push it over
        target = cap - 1e-9 * max(1.0, cap)
        excess = x.sum(1) - target
        room = (x - l).sum(1)
        alpha = np.where(excess > 0, (target - l.sum()) / np.where(room > 0, room, 1.0), 1.0)
        alpha = np.clip(alpha, 0.0, 1.0)
        out[:, part] = l + alpha[:, None] * (x - l)
    return out


class LeaderObjective:
    """Scenario-weighted operator profit (minus dispatch penalty) of price genomes."""

    def __init__(self, system, scenarios):
        self.system = system
        self.scenarios = scenarios
        self.dispatcher = Dispatcher(system, scenarios)
        self.probs = self.dispatcher.probs
        bs = system.buildings
        self.omega = np.array([b.params.omega for b in bs])
        self.vartheta = np.array([b.params.vartheta for b in bs])
        self.theta = np.array([b.params.theta for b in bs])
        self.lo = np.array([b.base.tsl_min for b in bs])
        self.hi = np.array([b.base.tsl_max for b in bs])
        self.il_max = np.array([b.base.il_max for b in bs])
        self.ch_max = np.array([b.base.ch_max for b in bs])
        self.p0 = np.array([b.base.p0 for b in bs])
        self.h0 = np.array([b.base.h0 for b in bs])
        self.evaluations = 0
        self.failures = 0
        self.last_error = ""

    def responses(self, X):
        X = np.atleast_2d(X)
        return solve_followers(X[:, :T], X[:, T:], self.omega, self.vartheta, self.theta,
                               self.lo, self.hi, self.il_max, self.ch_max)

    def loads(self, X):
        tsl, il, ch, _ = self.responses(X)
        return self.p0 + tsl - il, self.h0 - ch

    def breakdown(self, X, p=None, h=None) -> dict:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if p is None:
            p, h = self.loads(X)
        res = self.dispatcher.run(p, h)
        grid, cost, pen = self.dispatcher.scenario_values(res)
        sales = (X[:, None, :T] * p + X[:, None, T:] * h).sum((1, 2))
        w = self.probs
        return {"sales": sales, "grid": grid @ w, "cost": cost @ w, "penalty": pen @ w,
                "profit": sales + (grid - cost - pen) @ w, "result": res, "p": p, "h": h}

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        self.evaluations += len(X)
        return self._evaluate(X)

    def _evaluate(self, X) -> np.ndarray:
        try:
            out = self.breakdown(X)["profit"]
            bad = ~np.isfinite(out)
            if bad.any():
                self.failures += int(bad.sum())
                self.last_error = "non-finite fitness"
                out = np.where(bad, FAILED_FITNESS, out)
            return out
        except (ValueError, FloatingPointError, ArithmeticError) as exc:
            # isolate the failing rows; they get a fitness no feasible point can reach
            if len(X) == 1:
                self.failures += 1
                self.last_error = str(exc)
                return np.array([FAILED_FITNESS])
            return np.concatenate([self._evaluate(X[k:k + 1]) for k in range(len(X))])


def stackelberg_iterate(game, de_config: DEConfig = DEConfig(), warm_start=None):
    """Run the leader search and assemble the equilibrium candidate.

    ``warm_start`` is an optional price genome (or stack of genomes) seeded
    into the initial population."""
    from .game import build_solution

    system = game.system
    obj = LeaderObjective(system, game.scenarios)
    tariff = system.tariff
    de = chaotic_de_optimize(obj, (tariff.lower, tariff.upper), de_config,
                             repair=lambda X: repair_prices(X, tariff), blocks=PRICE_BLOCKS, x0=warm_start)
    return build_solution(game, PriceSchedule.from_genome(de.x), objective=obj, de=de)
