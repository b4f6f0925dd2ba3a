import numpy as np
import pytest

from mcies.building import BuildingParams, DemandResponse, make_baseline
from mcies.market import (DeviceCostParams, PriceSchedule, ScenarioDispatch, TariffTable, delayed_heat_demand,
                          electric_balance_residual, follower_cost, grid_revenue, heat_balance_residual, net_profit,
                          operating_cost, price_check, sales_revenue, scenario_profit, startup_indicator,
                          tie_line_check)
from mcies.system import bundled_system

TARIFF = bundled_system().tariff


def _flat(mu, g):
    return PriceSchedule(np.full(24, mu), np.full(24, g))


def test_tariff_table_sums():
    assert TARIFF.p_buy.sum() == pytest.approx(17.38)
    assert TARIFF.p_buy[10] == 1.0 and TARIFF.p_buy[0] == 0.44
    assert np.all(TARIFF.p_sell == 0.4)


def test_sales_revenue():
    s = sales_revenue(_flat(0.65, 0.5), np.full(24, 100.0), np.full(24, 50.0))
    assert s[0] == pytest.approx(90.0)
    assert np.all(sales_revenue(_flat(0.65, 0.5), np.zeros(24), np.zeros(24)) == 0)
    two = sales_revenue(_flat(0.65, 0.5), np.full((2, 24), 100.0), np.full((2, 24), 50.0))
    assert two == pytest.approx(2 * s)


def test_grid_revenue():
    d = ScenarioDispatch.zeros(1)
    d.grid_sell[0, 0] = 100.0
    d.grid_buy[0, 10] = 100.0
    r = grid_revenue(TARIFF, d)
    assert r[0, 0] == pytest.approx(40.0)
    assert r[0, 10] == pytest.approx(-100.0)
    assert grid_revenue(TARIFF, ScenarioDispatch.zeros(1)).sum() == 0.0
    with pytest.raises(ValueError):
        grid_revenue(TARIFF, d, cap=50.0)


def test_device_costs():
    co = DeviceCostParams()
    assert co.mt_cost(100.0, 1, 1) == pytest.approx(62.3)
    assert co.chp_cost(500.0, 300.0) == pytest.approx(428.63, abs=5e-3)
    # the constant term is only charged while the unit runs
    assert co.chp_cost(0.0, 0.0) == 0.0


def test_operating_cost_counts_startups_once():
    co = DeviceCostParams(om={})
    d = ScenarioDispatch.zeros(1)
    d.mt_on[0, 3:6] = 1
    d.mt_p[0, 3:6] = 100.0
    c = operating_cost(co, d)
    assert c[0, 3] == pytest.approx(62.3) and c[0, 4] == pytest.approx(61.0)
    assert startup_indicator(d.mt_on).sum() == 1


def test_net_profit_scenario_convexity():
    co = DeviceCostParams()
    prices = _flat(0.65, 0.5)
    p = np.full((1, 24), 100.0)
    h = np.full((1, 24), 50.0)
    d = ScenarioDispatch.zeros(1)
    d.grid_buy[0] = 100.0
    d.eb_p[0] = 50.0 / 0.95
    d.grid_buy[0] += d.eb_p[0]
    one = net_profit([1.0], prices, TARIFF, co, p, h, [d])
    assert one == pytest.approx(scenario_profit(prices, TARIFF, co, p, h, d))
    assert net_profit([0.5, 0.5], prices, TARIFF, co, p, h, [d, d]) == pytest.approx(one)
    with pytest.raises(ValueError):
        net_profit([0.5, 0.5], prices, TARIFF, co, p, h, [d])


def test_electric_balance_residual():
    d = ScenarioDispatch.zeros(1)
    d.grid_buy[0] = 100.0
    assert np.all(electric_balance_residual(d, np.full((1, 24), 100.0)) == 0)
    assert electric_balance_residual(d, np.full((1, 24), 110.0), hour=1)[0] == pytest.approx(-10.0)
    d.wt[0] = 50.0
    d.grid_sell[0] = 50.0
    assert np.all(electric_balance_residual(d, np.full((1, 24), 100.0)) == 0)


def test_heat_balance_with_delay_and_loss():
    h = np.zeros((1, 24))
    h[0, 5] = 100.0
    losses = np.zeros((1, 24))
    dem = delayed_heat_demand(h, losses, [1], [0], 1)
    assert dem[0, 4] == 100.0 and dem[0, 5] == 0.0
    dem0 = delayed_heat_demand(h, losses, [0], [0], 1)
    assert np.array_equal(dem0, h)
    loss = np.full((1, 24), 16.0)
    assert delayed_heat_demand(h, loss, [0], [0], 1)[0, 0] == pytest.approx(16.0)
    d = ScenarioDispatch.zeros(1)
    d.chp_h[0] = dem[0]
    assert np.all(heat_balance_residual(d, dem) == 0)


def test_tie_line_check():
    d = ScenarioDispatch.zeros(2)
    assert tie_line_check(d) == []
    d.tie_p[0, :12] = 400.0
    d.tie_p[0, 12:] = -400.0
    d.tie_p[1] = -d.tie_p[0]
    assert tie_line_check(d) == []
    d.tie_h[0, 0] = 10.0
    d.tie_h[1, 0] = -10.0
    assert any("sum" in v.detail for v in tie_line_check(d))


def test_price_check_bounds():
    lo = PriceSchedule(TARIFF.p_sell.copy(), np.full(24, TARIFF.gamma_min))
    assert price_check(lo, TARIFF) == []
    hi = PriceSchedule(TARIFF.p_buy.copy(), np.full(24, TARIFF.gamma_min))
    assert any("sum" in v.detail for v in price_check(hi, TARIFF))
    g = PriceSchedule(TARIFF.p_sell.copy(), np.full(24, 0.66))
    assert any("heat prices sum" in v.detail for v in price_check(g, TARIFF))


def test_follower_cost_examples():
    params = BuildingParams(K=0.5, F=4.5e4, V=1.5e5, omega=0.003, vartheta=0.002, theta=0.008)
    base = make_baseline(params, np.full(24, 100.0), np.full(24, -10.0))
    prices = _flat(0.65, 0.5)
    zero = follower_cost(prices, params, base, DemandResponse.zeros(), [0.25, 0.75])
    assert zero == pytest.approx(float((0.65 * base.p0 + 0.5 * base.h0).sum()))
    il = np.zeros(24)
    il[4] = 5.0
    c = follower_cost(prices, params, base, DemandResponse(np.zeros(24), il, np.zeros(24)))
    assert c == pytest.approx(zero - 5 * 0.65 + 0.05)
    doubled = BuildingParams(K=0.5, F=4.5e4, V=1.5e5, omega=0.006, vartheta=0.004, theta=0.016)
    c2 = follower_cost(prices, doubled, base, DemandResponse(np.zeros(24), il, np.zeros(24)))
    assert c2 - (zero - 5 * 0.65) == pytest.approx(2 * 0.05)


def test_price_schedule_genome_roundtrip():
    x = np.r_[np.full(24, 0.5), np.full(24, 0.4)]
    ps = PriceSchedule.from_genome(x)
    assert np.array_equal(ps.to_genome(), x)
    assert np.array_equal(PriceSchedule.from_dict(ps.to_dict()).to_genome(), x)
    with pytest.raises(ValueError):
        PriceSchedule.from_genome(np.zeros(10))


def test_tariff_validation():
    with pytest.raises(ValueError):
        TariffTable(np.full(24, 0.3), np.full(24, 0.4))
