import copy
import json

import numpy as np
import pytest

from mcies.scenario import joint_scenarios, read_samples_csv, select_cluster_count
from mcies.system import data_path, read_series_csv, system_from_dict


def bundled_config():
    return json.loads(data_path("system.json").read_text()), read_series_csv(data_path("series.csv"))


def make_system(edit=None, series_edit=None):
    """Bundled system with in-place edits applied to copies of its config and series."""
    cfg, ser = bundled_config()
    cfg, ser = copy.deepcopy(cfg), {k: v.copy() for k, v in ser.items()}
    if edit:
        edit(cfg)
    if series_edit:
        series_edit(ser)
    return system_from_dict(cfg, ser)


def idle_storage(cies_cfg):
    for k in ("ees", "hst"):
        cies_cfg[k].update(p_ch_max=0.0, p_dc_max=0.0, k_loss=0.0)


def grid_qp_minimum(problem, step=0.5):
    """Brute-force minimum of a three-hour follower QP over a kW grid.

    The shifted load has two free hours; curtailment and heat cuts are
    separable per hour."""
    def axis(lo, hi):
        return np.arange(np.ceil(lo / step), np.floor(hi / step) + 1) * step

    a, b = np.meshgrid(axis(problem.tsl_lo[0], problem.tsl_hi[0]), axis(problem.tsl_lo[1], problem.tsl_hi[1]),
                       indexing="ij")
    c = -a - b
    ok = (c >= problem.tsl_lo[2] - 1e-12) & (c <= problem.tsl_hi[2] + 1e-12)
    mu, w = problem.mu, problem.omega
    f = mu[0] * a + mu[1] * b + mu[2] * c + w * (a ** 2 + b ** 2 + c ** 2)
    best = f[ok].min()
    for t in range(3):
        il = axis(0.0, problem.il_max[t])
        ch = axis(0.0, problem.ch_max[t])
        best += (-mu[t] * il + problem.vartheta * il ** 2).min()
        best += (-problem.gamma[t] * ch + problem.theta * ch ** 2).min()
    return float(best)


def quiet_system(n_cies=1):
    """No loads, renewables, storage or pipe losses: every device can stay off."""
    def edit(cfg):
        cfg["cies"] = cfg["cies"][:n_cies]
        for c in cfg["cies"]:
            c["wt_capacity"] = c["pv_capacity"] = 0.0
            idle_storage(c)
        cfg["buildings"] = [b for b in cfg["buildings"] if b["cies"] < n_cies]
        cfg["supply_temperature"] = 20.0

    def series(ser):
        for k in ser:
            if k.endswith("_p0"):
                ser[k][:] = 0.0
        ser["t_out"][:] = 20.0
    return make_system(edit, series)


@pytest.fixture(scope="session")
def bundled_scenarios():
    wt = read_samples_csv(data_path("wt_samples.csv"))
    pv = read_samples_csv(data_path("pv_samples.csv"))
    return joint_scenarios(select_cluster_count(wt, range(2, 11), 0)[1], select_cluster_count(pv, range(2, 11), 0)[1])


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
