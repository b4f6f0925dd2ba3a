import numpy as np
import pytest

from mcies.building import (BaselineProfile, BuildingParams, DemandResponse, DemandResponseError, baseline_heat_load,
                            comfort_band, effective_loads, make_baseline, pmv, pmv_cap, temperature_at_pmv, validate_dr)

P = BuildingParams(K=0.5, F=4.5e4, V=1.5e5)


def test_pmv_values():
    assert pmv(P, 22.0) == pytest.approx(0.359, abs=1e-3)
    assert pmv(P, 33.5) == pytest.approx(2.43)
    assert pmv(P, 20.0) == pytest.approx(0.0, abs=0.01)
    assert temperature_at_pmv(P, 0.0) == pytest.approx(20.0, abs=0.01)


def test_comfort_band_day_and_night():
    lo, hi = comfort_band(P, 12)
    assert pmv_cap(12) == 0.5
    assert (lo, hi) == pytest.approx((17.23, 22.78), abs=0.01)
    nlo, nhi = comfort_band(P, 3)
    assert nlo < lo and nhi > hi


def test_comfort_band_zero_cap_degenerates():
    lo, hi = comfort_band(P, 12, cap=0.0)
    assert lo == pytest.approx(hi)
    assert lo == pytest.approx(20.0, abs=0.01)


def test_comfort_band_rejects_bad_hour():
    with pytest.raises(ValueError):
        comfort_band(P, 0)


def test_baseline_heat_load_steady_state():
    assert baseline_heat_load(P, 20.0, 20.0) == pytest.approx(0.0)
    assert baseline_heat_load(P, 20.0, 0.0) == pytest.approx(450.0)
    P2 = BuildingParams(K=0.5, F=9e4, V=1.5e5)
    assert baseline_heat_load(P2, 20.0, 0.0) == pytest.approx(900.0)


def test_baseline_heat_load_thermal_inertia():
    # warming the air costs extra heat on top of the steady-state loss
    warm = baseline_heat_load(P, 21.0, 0.0, t_in_prev=20.0)
    assert warm > baseline_heat_load(P, 21.0, 0.0)


def test_building_params_validation():
    with pytest.raises(ValueError):
        BuildingParams(K=-1, F=1, V=1)


def _base():
    p0 = np.full(24, 100.0)
    t_out = np.full(24, -10.0)
    return make_baseline(P, p0, t_out)


def test_effective_loads_examples():
    base = _base()
    tsl = np.zeros(24)
    tsl[0], tsl[1] = 10.0, -10.0
    il = np.zeros(24)
    il[0] = 5.0
    ch = np.zeros(24)
    ch[3] = 31.25
    p, h = effective_loads(base, DemandResponse(tsl, il, ch))
    assert p[0] == pytest.approx(105.0)
    assert h[3] == pytest.approx(base.h0[3] - 31.25)
    p0, h0 = effective_loads(base, DemandResponse.zeros())
    assert np.array_equal(p0, base.p0) and np.array_equal(h0, base.h0)


def test_effective_loads_heat_example():
    base = BaselineProfile(np.full(24, 100.0), np.full(24, 300.0), np.zeros(24), np.full(24, -10.0),
                           np.full(24, 10.0), np.full(24, 10.0), np.full(24, 200.0))
    ch = np.zeros(24)
    ch[0] = 31.25
    _, h = effective_loads(base, DemandResponse(np.zeros(24), np.zeros(24), ch))
    assert h[0] == pytest.approx(268.75)


def test_validate_dr_cases():
    base = _base()
    assert validate_dr(base, DemandResponse.zeros()) == []
    tsl = np.zeros(24)
    tsl[0] = 1.0
    v = validate_dr(base, DemandResponse(tsl, np.zeros(24), np.zeros(24)))
    assert [x.constraint for x in v] == ["tsl_sum"]
    ch = np.zeros(24)
    ch[5] = base.ch_max[5] + 1.0
    v = validate_dr(base, DemandResponse(np.zeros(24), np.zeros(24), ch))
    assert len(v) == 1 and v[0].constraint == "heat_cut_bounds" and v[0].hour == 6


def test_effective_loads_rejects_invalid_response():
    base = _base()
    il = np.full(24, 1e3)
    with pytest.raises(DemandResponseError):
        effective_loads(base, DemandResponse(np.zeros(24), il, np.zeros(24)))


def test_baseline_flexibility_share():
    base = _base()
    assert np.allclose(base.tsl_max, 10.0) and np.allclose(base.tsl_min, -10.0)
    assert np.allclose(base.il_max, 10.0)
    assert np.all(base.h_min <= base.h0) and np.all(base.ch_max >= 0)
    rigid = base.without_flexibility()
    assert np.all(rigid.il_max == 0) and np.all(rigid.ch_max == 0)


def test_demand_response_roundtrip():
    dr = DemandResponse(np.arange(24.0) - 11.5, np.ones(24), np.zeros(24))
    back = DemandResponse.from_dict(dr.to_dict())
    assert np.array_equal(back.tsl, dr.tsl)
