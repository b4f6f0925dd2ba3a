import numpy as np
import pytest

from conftest import grid_qp_minimum, idle_storage, make_system, quiet_system
from mcies.game import StackelbergGame, check_solution
from mcies.scenario import JointScenarioSet
from mcies.solver import (FAILED_FITNESS, DEConfig, Dispatcher, LeaderObjective, QPProblem, chaotic_de_optimize,
                          follower_qp_solve, kkt_residual, repair_prices, scenario_dispatch, stackelberg_iterate)


def _qp(mu, gamma=None, omega=0.003, vartheta=0.01, theta=0.008, box=10.0, il=10.0, ch=10.0):
    n = len(mu)
    gamma = np.zeros(n) if gamma is None else gamma
    return QPProblem(np.asarray(mu, float), np.asarray(gamma, float), omega, vartheta, theta,
                     np.full(n, -box), np.full(n, box), np.full(n, il), np.full(n, ch))


# -- follower QP --------------------------------------------------------------


def test_qp_two_hour_corner():
    dr, info = follower_qp_solve(_qp([1.0, 0.4]))
    assert dr.tsl == pytest.approx([-10.0, 10.0])
    assert info.kkt <= 1e-8


def test_qp_zero_prices():
    dr, _ = follower_qp_solve(_qp(np.zeros(24), np.zeros(24)))
    assert np.all(dr.tsl == 0) and np.all(dr.il == 0) and np.all(dr.ch == 0)


def test_qp_flat_price_interior():
    p = _qp(np.full(24, 0.65), np.full(24, 0.5), vartheta=0.002, box=1000.0, il=1000.0, ch=1000.0)
    dr, info = follower_qp_solve(p)
    assert np.allclose(dr.tsl, 0.0, atol=1e-9)
    assert dr.il == pytest.approx(np.full(24, 162.5))
    assert dr.ch == pytest.approx(np.full(24, 31.25))
    capped = _qp(np.full(24, 0.65), vartheta=0.002, box=1000.0, il=20.0)
    assert follower_qp_solve(capped)[0].il == pytest.approx(np.full(24, 20.0))


def test_qp_matches_grid_enumeration(rng):
    for _ in range(10):
        mu = rng.uniform(0.4, 1.0, 3)
        gamma = rng.uniform(0.3, 0.66, 3)
        box = rng.integers(4, 31, 3) * 0.5  # on the grid so the corners are reachable
        p = QPProblem(mu, gamma, rng.uniform(0.002, 0.004), rng.uniform(0.01, 0.013), rng.uniform(0.007, 0.008),
                      -box, box, np.full(3, 20.0), np.full(3, 40.0))
        dr, info = follower_qp_solve(p)
        p0, h0 = rng.uniform(50, 200, 3), rng.uniform(100, 400, 3)
        fixed = float(mu @ p0 + gamma @ h0)
        best = fixed + grid_qp_minimum(p)
        got = fixed + p.objective(dr.tsl, dr.il, dr.ch)
        assert got <= best + 1e-9
        assert best - got <= 1e-3 * abs(best)
        assert info.kkt <= 1e-8


def test_qp_warm_start_and_kkt():
    p = _qp(np.linspace(0.4, 1.0, 24), np.full(24, 0.5))
    dr, info = follower_qp_solve(p)
    dr2, info2 = follower_qp_solve(p, nu0=info.nu)
    assert np.allclose(dr.tsl, dr2.tsl, atol=1e-10)
    assert kkt_residual(p, dr, info.nu) <= 1e-8
    worse = type(dr)(dr.tsl * 0.95, dr.il, dr.ch)
    assert kkt_residual(p, worse, info.nu) > 1e-3


def test_qp_rejects_nonconvex_or_empty():
    with pytest.raises(ValueError):
        _qp([0.5, 0.5], omega=0.0)
    with pytest.raises(ValueError):
        QPProblem(np.zeros(2), np.zeros(2), 1, 1, 1, np.ones(2), np.full(2, 2.0), np.zeros(2), np.zeros(2))


# -- dispatch -----------------------------------------------------------------


def _one(wt=0.0, pv=0.0):
    return JointScenarioSet.deterministic(np.full(24, wt), np.full(24, pv))


def test_dispatch_all_off_without_demand():
    s = quiet_system()
    obj = LeaderObjective(s, _one())
    b = obj.breakdown(s.tariff.lower[None])
    assert b["cost"][0] == 0.0 and b["grid"][0] == 0.0 and b["penalty"][0] == 0.0
    d = obj.dispatcher.dispatches(b["result"])[0]
    for f in ("chp_p", "chp_h", "mt_p", "eb_p", "grid_buy", "grid_sell"):
        assert np.all(getattr(d, f) == 0.0), f


def test_dispatch_surplus_is_sold():
    def edit(cfg):
        cfg["cies"] = cfg["cies"][:1]
        cfg["cies"][0]["pv_capacity"] = 2000.0
        cfg["buildings"] = [b for b in cfg["buildings"] if b["cies"] == 0]
    s = make_system(edit)
    obj = LeaderObjective(s, _one(pv=1.0))
    res = obj.breakdown(s.tariff.lower[None])["result"]
    d = obj.dispatcher.dispatches(res)[0]
    assert np.all(d.grid_buy == 0.0)
    assert np.all(d.grid_sell > 0.0)


def test_dispatch_boiler_covers_heat_when_chp_is_off():
    def edit(cfg):
        cfg["cies"] = cfg["cies"][:1]
        cfg["cies"][0]["chp"].update(p_max=0.0, h_max=0.0)
        idle_storage(cfg["cies"][0])
        cfg["buildings"] = [b for b in cfg["buildings"] if b["cies"] == 0]
    s = make_system(edit)
    disp = Dispatcher(s, _one())
    h = np.zeros((1, len(s.buildings), 24))
    idle = disp.heat_stage(h)["demand"][0, 0, 5]   # pipe losses alone
    h[0, 0, (5 + int(disp.delays[0])) % 24] = 570.0 - idle
    heat = disp.heat_stage(h)
    assert heat["eb_p"][0, 0, 5] == pytest.approx(600.0)
    assert heat["eb_h"][0, 0, 5] == pytest.approx(570.0)
    assert heat["unmet_h"][0, 0, 5] == pytest.approx(0.0)


def test_scenario_dispatch_matches_batch(bundled_scenarios):
    s = make_system(lambda cfg: cfg.update(tie_h_cap=0.0))
    obj = LeaderObjective(s, bundled_scenarios)
    x = repair_prices(s.tariff.upper, s.tariff)
    p, h = obj.loads(x)
    batch = obj.dispatcher.dispatches(obj.breakdown(x)["result"])
    one = scenario_dispatch(s, p[0], h[0], bundled_scenarios.scenarios[3])
    assert np.allclose(one.grid_buy, batch[3].grid_buy)
    assert np.allclose(one.chp_p, batch[3].chp_p)


def test_ties_never_lower_profit(bundled_scenarios):
    s = make_system()
    obj = LeaderObjective(s, bundled_scenarios)
    obj0 = LeaderObjective(s.with_tie_caps(0.0), bundled_scenarios)
    rng = np.random.default_rng(0)
    X = repair_prices(rng.uniform(s.tariff.lower, s.tariff.upper, size=(20, 48)), s.tariff)
    assert np.all(obj(X) >= obj0(X) - 1e-9)


# -- price repair -------------------------------------------------------------


def test_repair_prices_never_violates(rng):
    tr = make_system().tariff
    X = repair_prices(rng.uniform(-1, 2, size=(500, 48)), tr)
    for x in X:
        assert np.all(x >= tr.lower) and np.all(x <= tr.upper)
        assert x[:24].sum() <= 24 * tr.mu_av and x[24:].sum() <= 24 * tr.gamma_av


# -- chaotic DE ---------------------------------------------------------------


def test_de_sphere():
    cfg = DEConfig(population=50, max_iter=500, seed=1)
    res = chaotic_de_optimize(lambda X: -(X ** 2).sum(1), (np.full(48, -5.0), np.full(48, 5.0)), cfg)
    assert -res.fitness < 1e-3


def test_de_constant_objective_flat_trace():
    res = chaotic_de_optimize(lambda X: np.zeros(len(X)), (np.zeros(4), np.ones(4)),
                              DEConfig(population=10, max_iter=20))
    assert np.all(res.trace[1:] == res.trace[0])


def test_de_trace_nondecreasing_and_deterministic():
    f = lambda X: -((X - 0.3) ** 2).sum(1) + np.sin(5 * X).sum(1)
    cfg = DEConfig(population=20, max_iter=40, seed=7)
    a = chaotic_de_optimize(f, (np.zeros(6), np.ones(6)), cfg)
    b = chaotic_de_optimize(f, (np.zeros(6), np.ones(6)), cfg)
    assert np.all(np.diff(a.trace) >= 0)
    assert a.trace.tobytes() == b.trace.tobytes()
    assert len(a.trace) == cfg.max_iter + 2


def test_de_warm_start_is_kept():
    f = lambda X: -((X - 0.25) ** 2).sum(1)
    res = chaotic_de_optimize(f, (np.zeros(3), np.ones(3)), DEConfig(population=8, max_iter=1, polish=False),
                              x0=np.full(3, 0.25))
    assert res.fitness == 0.0


def test_de_config_validation():
    with pytest.raises(ValueError):
        DEConfig(population=3)
    with pytest.raises(ValueError):
        DEConfig(f_min=0.9, f_max=0.5)


# -- leader search ------------------------------------------------------------


def test_rigid_single_building_prices_hit_upper_bounds():
    def edit(cfg):
        cfg["cies"] = cfg["cies"][:1]
        cfg["buildings"] = cfg["buildings"][:1]
        cfg["tariff"]["p_buy"] = [0.7] * 24
        cfg["tariff"]["mu_av"] = 0.7
        cfg["tariff"]["gamma_av"] = 0.66
    s = make_system(edit).without_flexibility()
    game = StackelbergGame(s, _one())
    sol = stackelberg_iterate(game, DEConfig(population=12, max_iter=30, polish_polls=20))
    assert sol.prices.mu_sell == pytest.approx(np.full(24, 0.7), abs=1e-6)
    assert sol.prices.gamma_sell == pytest.approx(np.full(24, 0.66), abs=1e-6)
    assert check_solution(game, sol) == []


def test_objective_penalizes_failures():
    s = make_system()
    obj = LeaderObjective(s, _one())
    out = obj(np.full((2, 48), np.nan))
    assert obj.failures == 2 and np.all(out == FAILED_FITNESS)
    assert obj(s.tariff.lower[None])[0] > FAILED_FITNESS and obj.failures == 2
