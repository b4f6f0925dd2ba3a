"""Leader-follower game assembly, closed-form follower properties and the
sampled equilibrium certificate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .building import BuildingParams, DemandResponse, Violation, validate_dr
from .devices import chp_validate, mt_validate, storage_validate
from .market import (PriceSchedule, ScenarioDispatch, cies_demand, delayed_heat_demand, discomfort_cost,
                     electric_balance_residual, follower_cost, heat_balance_residual, price_check,
                     tie_line_check)
from .solver import LeaderObjective, QPProblem, follower_qp_solve, repair_prices

T = 24


class InfeasibleSolutionError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"solution violates constraints: {head}{more}")


@dataclass(frozen=True)
class StackelbergGame:
    system: object
    scenarios: object

    def __post_init__(self):
        tr = self.system.tariff
        if tr.p_sell.sum() > 24 * tr.mu_av or 24 * tr.gamma_min > 24 * tr.gamma_av:
            raise ValueError("leader strategy set is empty under the average caps")
        if not self.system.buildings:
            raise ValueError("game needs at least one follower")
        if abs(float(np.sum(self.scenarios.probabilities)) - 1.0) > 1e-9:
            raise ValueError("scenario probabilities must sum to one")


@dataclass
class EquilibriumSolution:
    prices: PriceSchedule
    responses: tuple
    multipliers: tuple
    dispatches: tuple
    ledger: dict
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    user_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "prices": self.prices.to_dict(),
            "responses": [r.to_dict() for r in self.responses],
            "multipliers": [float(v) for v in self.multipliers],
            "dispatches": [d.to_dict() for d in self.dispatches],
            "ledger": self.ledger,
            "trace": [float(v) for v in self.trace],
            "user_trace": np.asarray(self.user_trace).tolist(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EquilibriumSolution":
        return cls(PriceSchedule.from_dict(d["prices"]),
                   tuple(DemandResponse.from_dict(r) for r in d["responses"]),
                   tuple(d.get("multipliers", ())),
                   tuple(ScenarioDispatch.from_dict(x) for x in d["dispatches"]),
                   d["ledger"], np.array(d.get("trace", [])), np.array(d.get("user_trace", [])),
                   d.get("info", {}))


# ---------------------------------------------------------------------------
# closed-form follower properties
# ---------------------------------------------------------------------------


def stationary_response(prices: PriceSchedule, params: BuildingParams, hour: int) -> tuple[float, float, float]:
    """Unconstrained minimizer of one hour's follower cost: (tsl0, il0, ch0)."""
    if not 1 <= hour <= T:
        raise ValueError(f"hour must be in 1..{T}")
    if min(params.omega, params.vartheta, params.theta) <= 0:
        raise ValueError("discomfort coefficients must be strictly positive")
    mu = float(prices.mu_sell[hour - 1])
    g = float(prices.gamma_sell[hour - 1])
    return -mu / (2 * params.omega), mu / (2 * params.vartheta), g / (2 * params.theta)


def verify_follower_convexity(params: BuildingParams) -> bool:
    """The follower Hessian is diag(2 omega, 2 vartheta, 2 theta)."""
    return bool(params.omega > 0 and params.vartheta > 0 and params.theta > 0)


def served_load(solution: EquilibriumSolution, system, hour: int, commodity: str, probabilities=None) -> float:
    """Scenario-weighted load sold to users at ``hour``."""
    w = 1.0 if probabilities is None else float(np.sum(probabilities))
    k = hour - 1
    if commodity == "electricity":
        return w * sum(float(b.base.p0[k] + r.tsl[k] - r.il[k]) for b, r in zip(system.buildings, solution.responses))
    if commodity == "heat":
        return w * sum(float(b.base.h0[k] - r.ch[k]) for b, r in zip(system.buildings, solution.responses))
    raise ValueError("commodity must be 'electricity' or 'heat'")


def leader_profit_gradient_sign(solution: EquilibriumSolution, system, hour: int, commodity: str) -> int:
    """Sign of the operator's profit slope in one price with everything else frozen."""
    return int(np.sign(served_load(solution, system, hour, commodity)))


# ---------------------------------------------------------------------------
# assembly and checks
# ---------------------------------------------------------------------------


def _user_costs(system, prices: PriceSchedule, responses) -> list[float]:
    return [follower_cost(prices, b.params, b.base, r) for b, r in zip(system.buildings, responses)]


def build_solution(game: StackelbergGame, prices: PriceSchedule, objective=None, de=None) -> EquilibriumSolution:
    system = game.system
    obj = objective if objective is not None else LeaderObjective(system, game.scenarios)
    x = prices.to_genome()[None]
    tsl, il, ch, nu = obj.responses(x)
    responses = tuple(DemandResponse(tsl[0, i], il[0, i], ch[0, i]) for i in range(len(system.buildings)))
    br = obj.breakdown(x)
    dispatches = tuple(obj.dispatcher.dispatches(br["result"]))
    res = br["result"]
    grid, cost, pen = obj.dispatcher.scenario_values(res)
    user_costs = _user_costs(system, prices, responses)
    ledger = {
        "profit": float(br["profit"][0]),
        "sales": float(br["sales"][0]),
        "grid": float(br["grid"][0]),
        "operating_cost": float(br["cost"][0]),
        "penalty": float(br["penalty"][0]),
        "scenario_profit": [float(br["sales"][0] + g - c) for g, c in zip(grid[0], cost[0])],
        "probabilities": [float(p) for p in obj.probs],
        "user_costs": user_costs,
        "user_discomfort": [discomfort_cost(b.params, r) for b, r in zip(system.buildings, responses)],
    }
    info = {}
    trace = np.zeros(0)
    user_trace = np.zeros((0, len(system.buildings)))
    if de is not None:
        trace = de.trace
        user_trace = np.array([_user_costs(system, PriceSchedule.from_genome(g), _responses_at(obj, g))
                               for g in de.trace_x])
        info = {"evaluations": int(obj.evaluations), "de_best": float(de.de_fitness),
                "polish_polls": int(de.polish_polls), "failed_evaluations": int(obj.failures),
                "last_failure": obj.last_error}
    return EquilibriumSolution(prices, responses, tuple(float(v) for v in nu[0]), dispatches, ledger,
                               trace, user_trace, info)


def _responses_at(obj, genome):
    tsl, il, ch, _ = obj.responses(np.asarray(genome)[None])
    return [DemandResponse(tsl[0, i], il[0, i], ch[0, i]) for i in range(tsl.shape[1])]


def balance_residuals(system, solution: EquilibriumSolution) -> tuple[np.ndarray, np.ndarray, float]:
    """Electric and heat residuals (S, J, T) and the peak load used as scale."""
    p = np.array([b.base.p0 + r.tsl - r.il for b, r in zip(system.buildings, solution.responses)])
    h = np.array([b.base.h0 - r.ch for b, r in zip(system.buildings, solution.responses)])
    p_dem = cies_demand(p, system.building_cies, system.n_cies)
    h_dem = delayed_heat_demand(h, system.pipe_losses(), system.delays(), system.building_cies, system.n_cies)
    e = np.array([electric_balance_residual(d, p_dem) for d in solution.dispatches])
    q = np.array([heat_balance_residual(d, h_dem) for d in solution.dispatches])
    peak = max(float(p_dem.max()), float(h_dem.max()), 1.0)
    return e, q, peak


def check_solution(game: StackelbergGame, solution: EquilibriumSolution, tol: float = 1e-6) -> list[Violation]:
    """Every scheduling constraint, per scenario where relevant."""
    system = game.system
    out = list(price_check(solution.prices, system.tariff))
    for b, r in zip(system.buildings, solution.responses):
        out += [Violation(v.constraint, v.hour, f"{b.name}: {v.detail}", v.amount) for v in validate_dr(b.base, r)]
    if len(solution.dispatches) != game.scenarios.s_max:
        out.append(Violation("dispatch_missing", None, "missing scenario dispatch"))
        return out
    e, q, peak = balance_residuals(system, solution)
    for name, res in (("electric_balance", e), ("heat_balance", q)):
        bad = np.argwhere(np.abs(res) > tol * peak)
        for s, j, t in bad:
            out.append(Violation(name, int(t) + 1, f"scenario {s + 1} CIES {j + 1} residual {res[s, j, t]:.6g} kW",
                                 float(res[s, j, t])))
    g = system.grid_cap
    for s, d in enumerate(solution.dispatches):
        tag = f"scenario {s + 1}"
        if np.any(d.grid_buy > g + tol) or np.any(d.grid_sell > g + tol) or np.any(d.grid_buy < -tol) \
                or np.any(d.grid_sell < -tol):
            out.append(Violation("grid_exchange", None, f"{tag}: grid exchange outside [0, {g}]"))
        if np.any((d.grid_buy > tol) & (d.grid_sell > tol)):
            out.append(Violation("grid_exchange", None, f"{tag}: simultaneous purchase and sale"))
        out += [Violation(v.constraint, v.hour, f"{tag}: {v.detail}", v.amount)
                for v in tie_line_check(d, system.tie_p_cap, system.tie_h_cap, tol)]
        for j, c in enumerate(system.cies):
            where = f"{tag} {c.name}"
            if np.any(d.eb_p[j] < -tol) or np.any(d.eb_p[j] > c.eb.p_max + tol):
                out.append(Violation("eb_power", None, f"{where}: boiler input outside [0, {c.eb.p_max}]"))
            if np.any(np.abs(d.eb_h[j] - c.eb.eta * d.eb_p[j]) > tol):
                out.append(Violation("eb_conversion", None, f"{where}: boiler heat does not match its input"))
            _, vs = chp_validate(c.chp, d.chp_p[j], d.chp_h[j], tol)
            vs += mt_validate(c.mt, d.mt_p[j], d.mt_on[j], tol)
            vs += storage_validate(c.ees, d.ees_ch[j], d.ees_dc[j], end_rule=system.storage_end_rule, tol=tol)
            vs += storage_validate(c.hst, d.hst_ch[j], d.hst_dc[j], end_rule=system.storage_end_rule, tol=tol)
            out += [Violation(v.constraint, v.hour, f"{where}: {v.detail}", v.amount) for v in vs]
            if np.any(d.curtail[j] < -tol):
                out.append(Violation("electric_balance", None, f"{where}: negative curtailment"))
    return out


def ledger_consistent(solution: EquilibriumSolution, tol: float = 1e-6) -> bool:
    L = solution.ledger
    parts = L["sales"] + L["grid"] - L["operating_cost"] - L["penalty"]
    by_scen = float(np.dot(L["probabilities"], L["scenario_profit"])) - L["penalty"]
    scale = max(1.0, abs(L["profit"]))
    return abs(parts - L["profit"]) <= tol * scale and abs(by_scen - L["profit"]) <= tol * scale


def equilibrium_check(game: StackelbergGame, solution: EquilibriumSolution, eps_follower: float = 1e-4,
                      eps_leader: float = 5e-3, n_probes: int = 100, seed: int = 0,
                      objective: LeaderObjective | None = None) -> dict:
    """Sampled falsification test of the equilibrium conditions.

    Follower test: each building re-solves its problem at the solution
    prices; the gain is measured against the magnitude of the part of its
    cost that its own decisions control.  Leader test: random feasible price
    perturbations within +/-5 % (repaired onto the average caps), each with
    fresh follower responses and dispatch.
    """
    system = game.system
    bad = check_solution(game, solution)
    if bad:
        raise InfeasibleSolutionError(bad)
    followers = []
    for b, r in zip(system.buildings, solution.responses):
        prob = QPProblem.from_building(solution.prices, b)
        best, info = follower_qp_solve(prob)
        f_sol = prob.objective(r.tsl, r.il, r.ch)
        f_opt = prob.objective(best.tsl, best.il, best.ch)
        rel = (f_sol - f_opt) / max(abs(f_opt), 1e-12)
        followers.append({"building": b.name, "cost": f_sol, "best_cost": f_opt, "improvement": rel,
                          "kkt": info.kkt, "pass": bool(rel < eps_follower)})
    obj = objective if objective is not None else LeaderObjective(system, game.scenarios)
    x = solution.prices.to_genome()
    f0 = float(obj(x[None])[0])
    rng = np.random.default_rng(seed)
    X = x * (1.0 + rng.uniform(-0.05, 0.05, size=(n_probes, x.size)))
    X = repair_prices(X, system.tariff)
    f = obj(X)
    gains = (f - f0) / max(abs(f0), 1.0)
    k = int(np.argmax(gains))
    leader = {"profit": f0, "n_probes": int(n_probes), "best_improvement": float(gains[k]),
              "best_probe_profit": float(f[k]), "worst_probe": [float(v) for v in X[k]],
              "pass": bool(gains[k] < eps_leader)}
    ok = all(fr["pass"] for fr in followers) and leader["pass"]
    return {"pass": ok, "eps_follower": eps_follower, "eps_leader": eps_leader, "seed": seed,
            "followers": followers, "leader": leader}
