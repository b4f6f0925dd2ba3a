import dataclasses

import numpy as np
import pytest

from conftest import make_system
from mcies.building import BuildingParams, DemandResponse
from mcies.game import (EquilibriumSolution, InfeasibleSolutionError, StackelbergGame, check_solution,
                        equilibrium_check, leader_profit_gradient_sign, ledger_consistent, served_load,
                        stationary_response, verify_follower_convexity)
from mcies.market import PriceSchedule, cies_demand, net_profit
from mcies.scenario import JointScenarioSet
from mcies.solver import DEConfig, scenario_dispatch, stackelberg_iterate


def _flat(mu, g):
    return PriceSchedule(np.full(24, mu), np.full(24, g))


def _small_system():
    def edit(cfg):
        cfg["cies"] = cfg["cies"][:1]
        cfg["buildings"] = [b for b in cfg["buildings"] if b["cies"] == 0][:1]
    return make_system(edit)


@pytest.fixture(scope="module")
def small():
    s = _small_system()
    scen = JointScenarioSet.deterministic(np.full(24, 0.3), np.full(24, 0.2))
    game = StackelbergGame(s, scen)
    sol = stackelberg_iterate(game, DEConfig(population=16, max_iter=40, seed=3))
    return game, sol


def _with_responses(game, sol, responses):
    """Same prices, new responses, dispatch recomputed so the balances still hold."""
    s = game.system
    p = np.array([b.base.p0 + r.tsl - r.il for b, r in zip(s.buildings, responses)])
    h = np.array([b.base.h0 - r.ch for b, r in zip(s.buildings, responses)])
    ds = tuple(scenario_dispatch(s, p, h, sc) for sc in game.scenarios.scenarios)
    return dataclasses.replace(sol, responses=tuple(responses), dispatches=ds)


def test_stationary_response_closed_form():
    params = BuildingParams(K=0.5, F=4.5e4, V=1.5e5, omega=0.003, vartheta=0.002, theta=0.008)
    tsl, il, ch = stationary_response(_flat(0.65, 0.5), params, 1)
    assert il == pytest.approx(162.5)
    assert ch == pytest.approx(31.25)
    assert tsl == pytest.approx(-0.65 / 0.006)
    with pytest.raises(ValueError):
        stationary_response(_flat(0.65, 0.5), params, 25)


def test_follower_convexity():
    assert verify_follower_convexity(BuildingParams(K=0.5, F=1, V=1, omega=0.003, vartheta=0.01, theta=0.008))
    assert not verify_follower_convexity(BuildingParams(K=0.5, F=1, V=1, omega=0.0, vartheta=0.01, theta=0.008))


def test_game_rejects_empty_strategy_set():
    scen = JointScenarioSet.deterministic(np.zeros(24), np.zeros(24))
    base = _small_system()
    with pytest.raises(ValueError):
        StackelbergGame(dataclasses.replace(base, tariff=dataclasses.replace(base.tariff, mu_av=0.3)), scen)
    with pytest.raises(ValueError):
        StackelbergGame(dataclasses.replace(base, buildings=()), scen)


def test_solution_is_feasible_and_ledger_adds_up(small):
    game, sol = small
    assert check_solution(game, sol) == []
    assert ledger_consistent(sol)
    assert np.all(np.diff(sol.trace) >= 0)
    back = EquilibriumSolution.from_dict(sol.to_dict())
    assert check_solution(game, back) == []


def test_ledger_inconsistency_detected(small):
    _, sol = small
    bad = dataclasses.replace(sol, ledger=dict(sol.ledger, profit=sol.ledger["profit"] + 1.0))
    assert not ledger_consistent(bad)


def test_equilibrium_check_passes_at_solution(small):
    game, sol = small
    rep = equilibrium_check(game, sol, n_probes=40)
    assert rep["pass"], rep["leader"]
    assert all(f["kkt"] <= 1e-8 for f in rep["followers"])


def test_degraded_response_fails_follower_test(small):
    game, sol = small
    worse = [DemandResponse(r.tsl, 0.95 * r.il, r.ch) for r in sol.responses]
    degraded = _with_responses(game, sol, worse)
    assert check_solution(game, degraded) == []
    rep = equilibrium_check(game, degraded, n_probes=5)
    assert not rep["pass"]
    assert not any(f["pass"] for f in rep["followers"])


def test_infeasible_solution_is_refused(small):
    game, sol = small
    bad = dataclasses.replace(sol, prices=PriceSchedule(game.system.tariff.p_buy.copy(), np.full(24, 0.66)))
    with pytest.raises(InfeasibleSolutionError):
        equilibrium_check(game, bad)


def test_profit_slope_equals_served_load(small):
    game, sol = small
    s = game.system
    p = np.array([b.base.p0 + r.tsl - r.il for b, r in zip(s.buildings, sol.responses)])
    h = np.array([b.base.h0 - r.ch for b, r in zip(s.buildings, sol.responses)])
    probs = game.scenarios.probabilities
    f0 = net_profit(probs, sol.prices, s.tariff, s.costs, p, h, sol.dispatches)
    for hour, kind in ((1, "electricity"), (12, "heat")):
        x = sol.prices.to_genome()
        x[hour - 1 + (24 if kind == "heat" else 0)] += 1e-3
        f1 = net_profit(probs, PriceSchedule.from_genome(x), s.tariff, s.costs, p, h, sol.dispatches)
        assert (f1 - f0) / 1e-3 == pytest.approx(served_load(sol, s, hour, kind, probs), rel=1e-9, abs=1e-6)
        assert leader_profit_gradient_sign(sol, s, hour, kind) == 1
    assert cies_demand(p, s.building_cies, s.n_cies).shape == (1, 24)
