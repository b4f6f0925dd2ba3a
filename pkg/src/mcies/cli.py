"""Batch front door: clustering, scheduling, mode comparison, tie-line sweep
and solution re-checks.

Examples
--------
  mcies cluster src/mcies/data/wt_samples.csv src/mcies/data/pv_samples.csv --k-min 2 --k-max 10
  mcies schedule --config run.json --mode 1
  mcies modes --config run.json
  mcies sweep --config run.json --caps 0,100,200,300,400,500,600,700
  mcies check out/equilibrium.json --config run.json

Exit codes: 0 success, 2 constraint violations found, 3 input error.
Every output carries the run hash and seed; CSV files as leading ``#`` lines.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .game import (EquilibriumSolution, StackelbergGame, build_solution, check_solution, equilibrium_check,
                   ledger_consistent)
from .market import PriceSchedule
from .scenario import (ClusteringError, JointScenarioSet, SampleFileError, db_sweep, joint_scenarios,
                       read_samples_csv)
from .solver import DEConfig, LeaderObjective, stackelberg_iterate
from .system import SystemFileError, bundled_system, data_path, load_system

ENV_OUTPUT = "MCIES_OUTPUT_DIR"
EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 2, 3
DEFAULT_CAPS = (0, 100, 200, 300, 400, 500, 600, 700)


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Paths are resolved against the config file's directory.

    ``system`` empty means the bundled instance.  Scenarios come from a
    ``scenarios`` JSON written by ``cluster`` or, failing that, from the WT
    and PV sample files clustered over ``k_range``.
    """

    system: str = ""
    scenarios: str = ""
    wt_samples: str = ""
    pv_samples: str = ""
    k_range: tuple = (2, 10)
    seed: int = 0
    de: dict = field(default_factory=dict)
    output_dir: str = "mcies_out"
    caps: tuple = DEFAULT_CAPS
    base_dir: str = "."

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def de_config(self) -> DEConfig:
        known = {f.name for f in fields(DEConfig)}
        bad = sorted(set(self.de) - known)
        if bad:
            raise InputError(f"unknown DE parameters {bad}")
        try:
            return DEConfig(**{**self.de, "seed": self.seed})
        except (TypeError, ValueError) as exc:
            raise InputError(f"DE parameters: {exc}") from None


def load_run_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from None
    if not isinstance(raw, dict):
        raise InputError(f"{p}: top level must be an object")
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    bad = sorted(set(raw) - known)
    if bad:
        raise InputError(f"{p}: unknown keys {bad}")
    cfg = RunConfig(**raw, base_dir=str(p.parent))
    if len(cfg.k_range) != 2 or int(cfg.k_range[0]) > int(cfg.k_range[1]):
        raise InputError(f"{p}: k_range must be [k_min, k_max]")
    cfg.k_range = (int(cfg.k_range[0]), int(cfg.k_range[1]))
    cfg.caps = tuple(float(c) for c in cfg.caps)
    cfg.seed = int(cfg.seed)
    return cfg


def load_inputs(cfg: RunConfig):
    """System model and joint scenario set named by a run config."""
    system = load_system(cfg.path(cfg.system)) if cfg.system else bundled_system()
    if cfg.scenarios:
        try:
            scen = JointScenarioSet.from_dict(json.loads(cfg.path(cfg.scenarios).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{cfg.scenarios}: {exc}") from None
    else:
        wt = cfg.path(cfg.wt_samples) if cfg.wt_samples else data_path("wt_samples.csv")
        pv = cfg.path(cfg.pv_samples) if cfg.pv_samples else data_path("pv_samples.csv")
        ks = range(cfg.k_range[0], cfg.k_range[1] + 1)
        scen = joint_scenarios(_best_clustering(read_samples_csv(wt), ks, cfg.seed)[1],
                               _best_clustering(read_samples_csv(pv), ks, cfg.seed)[1])
    return system, scen


def run_hash(cfg: RunConfig, system, scen, extra: dict | None = None) -> str:
    blob = {"system": system.config_hash(), "scenarios": scen.to_dict(), "de": asdict(cfg.de_config()),
            "extra": extra or {}}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def output_dir(cli_value: str | None, cfg: RunConfig) -> Path:
    env = os.environ.get(ENV_OUTPUT)
    out = Path(env) if env else Path(cli_value) if cli_value else cfg.path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header: list, rows, meta: dict) -> None:
    with path.open("w", newline="") as fh:
        for k in sorted(meta):
            fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, obj: dict, meta: dict) -> None:
    path.write_text(json.dumps({"meta": meta, **obj}, indent=2, sort_keys=True) + "\n")


def _money(v) -> str:
    return f"{float(v):.2f}"


def _num(v) -> str:
    return f"{float(v):.6f}"


def _best_clustering(samples, ks, seed):
    rows = db_sweep(samples, ks, seed)
    k, db, res = min(rows, key=lambda r: (r[1], r[0]))
    return rows, res


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_cluster(sample_paths, k_range, seed, out: Path) -> int:
    meta = {"seed": seed, "k_range": f"{k_range[0]}..{k_range[1]}"}
    results = {}
    for p in sample_paths:
        samples = read_samples_csv(p)
        src = samples[0].source
        if src in results:
            raise InputError(f"{p}: source {src} given twice")
        ks = range(k_range[0], k_range[1] + 1)
        if k_range[0] < 2 or k_range[1] > len(samples):
            raise InputError(f"k range must lie within [2, {len(samples)}]")
        rows, best = _best_clustering(samples, ks, seed)
        digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()[:16]
        m = {**meta, "config_hash": digest, "source": src}
        write_csv(out / f"db_{src.lower()}.csv", ["k", "db_index"],
                  [[k, _num(db)] for k, db, _ in rows], m)
        write_csv(out / f"centroids_{src.lower()}.csv",
                  ["cluster", "count", "probability"] + [f"h{t}" for t in range(1, 25)],
                  [[i, n, _num(pr)] + [_num(v) for v in c]
                   for i, (n, pr, c) in enumerate(zip(best.counts, best.probabilities, best.centroids))], m)
        write_json(out / f"probabilities_{src.lower()}.json",
                   {"k": best.k, "counts": list(best.counts), "fractions": [str(f) for f in best.fractions],
                    "probabilities": [float(v) for v in best.probabilities]}, m)
        results[src] = (best, digest)
        print(f"{src}: k={best.k} probabilities={np.round(best.probabilities, 4).tolist()}")
    if {"WT", "PV"} <= set(results):
        js = joint_scenarios(results["WT"][0], results["PV"][0])
        digest = hashlib.sha256((results["WT"][1] + results["PV"][1]).encode()).hexdigest()[:16]
        write_json(out / "scenarios.json", js.to_dict(), {**meta, "config_hash": digest})
        print(f"joint scenarios: {js.s_max}")
    return EXIT_OK


def _system_for_mode(system, mode: int):
    if mode == 1:
        return system
    if mode == 2:
        return system.without_flexibility()
    if mode == 3:
        return system.with_tie_caps(0.0)
    raise InputError("mode must be 1, 2 or 3")


def solve(cfg: RunConfig, system, scen, mode: int = 1, warm_start=None):
    game = StackelbergGame(_system_for_mode(system, mode), scen)
    return game, stackelberg_iterate(game, cfg.de_config(), warm_start)


def cmd_schedule(cfg: RunConfig, out: Path, mode: int = 1) -> int:
    system, scen = load_inputs(cfg)
    game, sol = solve(cfg, system, scen, mode)
    meta = {"config_hash": run_hash(cfg, system, scen, {"mode": mode}), "seed": cfg.seed, "mode": mode}
    code = write_schedule(game, sol, scen, out, meta)
    L = sol.ledger
    print(f"mode {mode}: profit {_money(L['profit'])} user costs {[_money(c) for c in L['user_costs']]}")
    return code


def write_schedule(game, sol: EquilibriumSolution, scen, out: Path, meta: dict) -> int:
    system = game.system
    write_json(out / "equilibrium.json", {"solution": sol.to_dict(), "scenarios": scen.to_dict()}, meta)
    mu, g = sol.prices.mu_sell, sol.prices.gamma_sell
    write_csv(out / "prices.csv", ["hour", "mu_sell", "gamma_sell"],
              [[t + 1, _num(mu[t]), _num(g[t])] for t in range(24)], meta)
    for b, r in zip(system.buildings, sol.responses):
        p_after = b.base.p0 + r.tsl - r.il
        h_after = b.base.h0 - r.ch
        write_csv(out / f"loads_{b.name}.csv",
                  ["hour", "p_before", "p_after", "h_before", "h_after", "tsl", "il", "ch"],
                  [[t + 1] + [_num(v[t]) for v in (b.base.p0, p_after, b.base.h0, h_after, r.tsl, r.il, r.ch)]
                   for t in range(24)], meta)
    names = [b.name for b in system.buildings]
    ut = np.asarray(sol.user_trace)
    rows = [[k, _money(f)] + ([_money(c) for c in ut[k]] if len(ut) else []) for k, f in enumerate(sol.trace)]
    write_csv(out / "trace.csv", ["iteration", "profit"] + ([f"cost_{n}" for n in names] if len(ut) else []),
              rows, meta)
    violations = check_solution(game, sol)
    report = {"violations": [str(v) for v in violations], "ledger_consistent": ledger_consistent(sol),
              "ledger": sol.ledger, "info": sol.info}
    if not violations:
        report["equilibrium"] = equilibrium_check(game, sol, seed=meta["seed"])
    write_json(out / "report.json", report, meta)
    if violations:
        for v in violations[:20]:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    if sol.info.get("failed_evaluations"):
        print(f"note: {sol.info['failed_evaluations']} candidate evaluations failed and were penalized "
              f"({sol.info['last_failure']})", file=sys.stderr)
    return EXIT_OK


def run_modes(cfg: RunConfig, system, scen) -> dict:
    """Mode 1 full game, Mode 2 the Mode-1 prices with no demand response,
    Mode 3 the full game without tie-line exchange."""
    game1, sol1 = solve(cfg, system, scen, 1)
    game2 = StackelbergGame(system.without_flexibility(), scen)
    sol2 = build_solution(game2, sol1.prices)
    game3, sol3 = solve(cfg, system, scen, 3)
    return {1: (game1, sol1), 2: (game2, sol2), 3: (game3, sol3)}


def cmd_modes(cfg: RunConfig, out: Path) -> int:
    system, scen = load_inputs(cfg)
    res = run_modes(cfg, system, scen)
    meta = {"config_hash": run_hash(cfg, system, scen, {"command": "modes"}), "seed": cfg.seed}
    names = [b.name for b in system.buildings]
    rows = []
    bad = 0
    for m, (game, sol) in res.items():
        bad += len(check_solution(game, sol))
        rows.append([m, _money(sol.ledger["profit"])] + [_money(c) for c in sol.ledger["user_costs"]])
        print(f"mode {m}: profit {rows[-1][1]} user costs {rows[-1][2:]}")
    write_csv(out / "modes.csv", ["mode", "profit"] + [f"cost_{n}" for n in names], rows, meta)
    return EXIT_VIOLATION if bad else EXIT_OK


def sweep_runs(cfg: RunConfig, system, scen, caps) -> list:
    """One independent game per cap, ascending: (cap, game, solution)."""
    return [(float(cap),) + solve(cfg, system.with_tie_caps(cap), scen, 1) for cap in sorted(caps)]


def sweep_envelope(runs, scen) -> list[tuple[float, float, int, float]]:
    """Best-known profit per cap.

    Prices are feasible under any cap, so the prices found with a smaller cap
    are re-evaluated under each larger one and the better solution is kept.
    Rows are (cap, profit, violations, cap whose run supplied the prices).
    """
    rows = []
    for k, (cap, game, sol) in enumerate(runs):
        obj = LeaderObjective(game.system, scen)
        f = obj(np.stack([r[2].prices.to_genome() for r in runs[:k + 1]]))
        j = k if f[k] >= f.max() else int(np.argmax(f))
        best = sol if j == k else build_solution(game, runs[j][2].prices, objective=obj)
        rows.append((cap, best.ledger["profit"], len(check_solution(game, best)), runs[j][0]))
    return rows


def run_sweep(cfg: RunConfig, system, scen, caps) -> list[tuple[float, float, int, float]]:
    return sweep_envelope(sweep_runs(cfg, system, scen, caps), scen)


def sweep_argmax(profits) -> int:
    """First index attaining the largest profit at 2-decimal reporting."""
    r = np.round(np.asarray(profits, dtype=float), 2)
    return int(np.argmax(r))


def cmd_sweep(cfg: RunConfig, out: Path, caps) -> int:
    system, scen = load_inputs(cfg)
    rows = run_sweep(cfg, system, scen, caps)
    meta = {"config_hash": run_hash(cfg, system, scen, {"caps": [float(c) for c in caps]}), "seed": cfg.seed}
    k = sweep_argmax([r[1] for r in rows])
    write_csv(out / "sweep.csv", ["cap_kw", "profit", "prices_from_cap_kw", "argmax"],
              [[f"{c:g}", _money(p), f"{src:g}", int(i == k)] for i, (c, p, _, src) in enumerate(rows)], meta)
    for c, p, _, _ in rows:
        print(f"cap {c:g} kW: profit {_money(p)}")
    return EXIT_VIOLATION if any(r[2] for r in rows) else EXIT_OK


def cmd_check(cfg: RunConfig, solution_path: Path, out: Path) -> int:
    try:
        raw = json.loads(Path(solution_path).read_text())
        sol = EquilibriumSolution.from_dict(raw["solution"])
        scen = JointScenarioSet.from_dict(raw["scenarios"]) if "scenarios" in raw else None
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{solution_path}: {exc}") from None
    if scen is None:
        system, scen = load_inputs(cfg)
    else:
        system = load_system(cfg.path(cfg.system)) if cfg.system else bundled_system()
    mode = int(raw.get("meta", {}).get("mode", 1))
    game = StackelbergGame(_system_for_mode(system, mode), scen)
    if len(sol.responses) != len(system.buildings) or len(sol.dispatches) != scen.s_max:
        raise InputError(f"{solution_path}: solution does not match the system or scenario set")
    violations = check_solution(game, sol)
    meta = {"config_hash": raw.get("meta", {}).get("config_hash", ""), "seed": raw.get("meta", {}).get("seed", "")}
    write_json(out / "check.json", {"violations": [str(v) for v in violations],
                                    "ledger_consistent": ledger_consistent(sol)}, meta)
    for v in violations[:20]:
        print(f"violation: {v}", file=sys.stderr)
    print(f"{len(violations)} violations")
    return EXIT_VIOLATION if violations else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _caps(text: str):
    try:
        caps = [float(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("caps must be comma-separated numbers") from None
    if not caps or min(caps) < 0:
        raise argparse.ArgumentTypeError("caps must be non-negative")
    return caps


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcies", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON (defaults to the bundled instance)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output directory (overridden by ${ENV_OUTPUT})")

    p = sub.add_parser("cluster", help="DB-index sweep and scenario probabilities from sample CSVs")
    p.add_argument("samples", nargs="+", help="sample CSV files (source,h1..h24)")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)
    common(p)
    p = sub.add_parser("schedule", help="solve the leader-follower game")
    p.add_argument("--mode", type=int, default=1, choices=(1, 2, 3))
    common(p)
    p = sub.add_parser("modes", help="three-mode comparison table")
    common(p)
    p = sub.add_parser("sweep", help="operator profit against the tie-line limit")
    p.add_argument("--caps", type=_caps, help="comma-separated tie-line limits in kW")
    common(p)
    p = sub.add_parser("check", help="re-validate a solution file")
    p.add_argument("solution", help="equilibrium JSON written by schedule")
    common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = output_dir(args.out, cfg)
        if args.command == "cluster":
            return cmd_cluster(args.samples, (args.k_min, args.k_max), cfg.seed, out)
        if args.command == "schedule":
            return cmd_schedule(cfg, out, args.mode)
        if args.command == "modes":
            return cmd_modes(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.caps or cfg.caps)
        return cmd_check(cfg, args.solution, out)
    except (InputError, SystemFileError, SampleFileError, ClusteringError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
