"""The full MCIES instance: devices per community, buildings, pipes and tariffs."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .building import BaselineProfile, BuildingParams, make_baseline
from .devices import CHPUnit, ElectricBoiler, HeatPipe, MicroTurbine, StorageDevice, pipe_delay, pipe_loss
from .market import DeviceCostParams, TariffTable

T = 24


class SystemFileError(ValueError):
    pass


@dataclass(frozen=True)
class CIES:
    name: str
    wt_capacity: float
    pv_capacity: float
    eb: ElectricBoiler
    chp: CHPUnit
    mt: MicroTurbine
    ees: StorageDevice
    hst: StorageDevice


@dataclass(frozen=True)
class Building:
    name: str
    params: BuildingParams
    base: BaselineProfile
    cies: int
    pipe: HeatPipe


@dataclass(frozen=True)
class SystemModel:
    tariff: TariffTable
    costs: DeviceCostParams
    cies: tuple
    buildings: tuple
    grid_cap: float = 1000.0
    tie_p_cap: float = 400.0
    tie_h_cap: float = 400.0
    supply_temperature: float = 80.0
    penalty: float = 1e3
    storage_end_rule: str = "cyclic"
    psi0: int = 0
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not 1 <= len(self.cies) <= 2:
            raise ValueError("one or two communities are supported")
        if not self.buildings:
            raise ValueError("at least one building is required")
        for b in self.buildings:
            if not 0 <= b.cies < len(self.cies):
                raise ValueError(f"{b.name} refers to a missing community")
        if self.storage_end_rule not in ("cyclic", "pinned"):
            raise ValueError("storage_end_rule must be 'cyclic' or 'pinned'")
        if self.grid_cap < 0 or self.tie_p_cap < 0 or self.tie_h_cap < 0:
            raise ValueError("exchange limits must be non-negative")

    @property
    def n_cies(self) -> int:
        return len(self.cies)

    @property
    def building_cies(self) -> list[int]:
        return [b.cies for b in self.buildings]

    def delays(self) -> np.ndarray:
        return np.array([pipe_delay(b.pipe) for b in self.buildings], dtype=int)

    def pipe_losses(self) -> np.ndarray:
        """Heat lost in each building's supply pipe per hour, (I, T) kW."""
        return np.array([pipe_loss(b.pipe, self.supply_temperature, b.base.t_out)[2] for b in self.buildings])

    def with_tie_caps(self, p_cap: float, h_cap: float | None = None) -> "SystemModel":
        return replace(self, tie_p_cap=float(p_cap), tie_h_cap=float(p_cap if h_cap is None else h_cap))

    def without_flexibility(self) -> "SystemModel":
        return replace(self, buildings=tuple(replace(b, base=b.base.without_flexibility())
                                             for b in self.buildings))

    def config_hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _hourly(rows, label):
    a = np.asarray(rows, dtype=float)
    if a.shape != (T,) or not np.all(np.isfinite(a)):
        raise SystemFileError(f"{label}: expected {T} finite hourly values")
    return a


def read_series_csv(path) -> dict[str, np.ndarray]:
    """Hourly series file: header ``hour,<name>,...`` and rows for hours 1..24."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0] != "hour":
        raise SystemFileError(f"{path}:1: header must start with 'hour'")
    names = rows[0][1:]
    body = rows[1:]
    if len(body) != T:
        raise SystemFileError(f"{path}: expected {T} hourly rows, found {len(body)}")
    data = {n: [] for n in names}
    for k, r in enumerate(body, start=2):
        if len(r) != len(names) + 1:
            raise SystemFileError(f"{path}:{k}: expected {len(names) + 1} columns")
        try:
            if int(r[0]) != k - 1:
                raise SystemFileError(f"{path}:{k}: hours must run 1..{T} in order")
            for n, v in zip(names, r[1:]):
                data[n].append(float(v))
        except ValueError as exc:
            if isinstance(exc, SystemFileError):
                raise
            raise SystemFileError(f"{path}:{k}: {exc}") from None
    return {n: np.array(v) for n, v in data.items()}


def _storage(d, kind):
    return StorageDevice(kind=kind, c_min=d["c_min"], c_max=d["c_max"], c_init=d.get("c_init", d["c_min"]),
                         p_ch_max=d["p_ch_max"], p_dc_max=d["p_dc_max"], eta_ch=d.get("eta_ch", 0.9),
                         eta_dc=d.get("eta_dc", 0.9), k_loss=d.get("k_loss", 0.0))


def system_from_dict(cfg: dict, series: dict[str, np.ndarray]) -> SystemModel:
    try:
        tr = cfg["tariff"]
        tariff = TariffTable(_hourly(tr["p_buy"], "p_buy"), _hourly(tr["p_sell"], "p_sell"),
                             tr["gamma_min"], tr["gamma_max"], tr["mu_av"], tr["gamma_av"])
        costs = DeviceCostParams(**cfg["costs"])
        communities = tuple(
            CIES(c["name"], c["wt_capacity"], c["pv_capacity"], ElectricBoiler(**c["eb"]), CHPUnit(**c["chp"]),
                 MicroTurbine(**c["mt"]), _storage(c["ees"], "EES"), _storage(c["hst"], "HST"))
            for c in cfg["cies"])
        pd = cfg.get("pipe_defaults", {})
        pipes = {p["name"]: HeatPipe(**{**pd, **p}) for p in cfg["pipes"]}
        comfort = cfg.get("comfort", {})
        t_out = _hourly(series[cfg.get("t_out_column", "t_out")], "t_out")
        flex = cfg.get("flex_share", 0.1)
        buildings = []
        for b in cfg["buildings"]:
            params = BuildingParams(K=b["K"], F=b["F"], V=b["V"], c_air=b.get("c_air", 1.007),
                                    rho_air=b.get("rho_air", 1.2), omega=b["omega"], vartheta=b["vartheta"],
                                    theta=b["theta"], **comfort)
            p0 = _hourly(series[b["p0_column"]], b["p0_column"])
            base = make_baseline(params, p0, t_out, b.get("setpoint", 20.0), flex)
            buildings.append(Building(b["name"], params, base, int(b["cies"]), pipes[b["pipe"]]))
        return SystemModel(tariff, costs, communities, tuple(buildings),
                           grid_cap=cfg.get("grid_cap", 1000.0), tie_p_cap=cfg.get("tie_p_cap", 400.0),
                           tie_h_cap=cfg.get("tie_h_cap", 400.0),
                           supply_temperature=cfg.get("supply_temperature", 80.0),
                           penalty=cfg.get("penalty", 1e3), storage_end_rule=cfg.get("storage_end_rule", "cyclic"),
                           psi0=int(cfg.get("psi0", 0)),
                           source={"system": cfg, "series": {k: v.tolist() for k, v in sorted(series.items())}})
    except KeyError as exc:
        raise SystemFileError(f"missing field {exc}") from None
    except TypeError as exc:
        raise SystemFileError(str(exc)) from None


def load_system(path) -> SystemModel:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemFileError(f"{path}: {exc}") from None
    series = read_series_csv(path.parent / cfg.get("series", "series.csv"))
    return system_from_dict(cfg, series)


def data_path(name: str) -> Path:
    return Path(str(resources.files("mcies") / "data" / name))


def bundled_system() -> SystemModel:
    return load_system(data_path("system.json"))
