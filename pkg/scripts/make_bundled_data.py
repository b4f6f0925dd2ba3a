"""Regenerate the synthetic series and renewable sample files in src/mcies/data.

The hourly shapes are invented stand-ins for the figure-only load, weather and
renewable curves; cluster sizes are chosen so the planted templates carry the
published typical-scenario probabilities.
"""

import csv
from pathlib import Path

import numpy as np

from mcies.scenario import SamplePath, write_samples_csv

OUT = Path(__file__).resolve().parents[1] / "src" / "mcies" / "data"
H = np.arange(1, 25)


def bump(center, width):
    return np.exp(-0.5 * ((H - center) / width) ** 2)


def series():
    t_out = -9.0 + 5.0 * np.cos(2 * np.pi * (H - 14) / 24)
    shape = 0.55 + 0.1 * bump(8, 1.5) + 0.45 * bump(11.5, 1.6) + 0.5 * bump(20, 1.4) - 0.2 * bump(3.5, 2.5)
    users = {"User1_p0": 300.0, "User2_p0": 330.0, "User3_p0": 360.0}
    rows = {"t_out": np.round(t_out, 2)}
    for k, (name, scale) in enumerate(users.items()):
        wiggle = 1.0 + 0.03 * np.sin(2 * np.pi * (H + 3 * k) / 12)
        rows[name] = np.round(scale * shape * wiggle, 1)
    with open(OUT / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour"] + list(rows))
        for t in range(24):
            w.writerow([t + 1] + [f"{rows[n][t]:g}" for n in rows])


def templates():
    """Planted renewable shapes and the number of samples drawn around each."""
    wt = [
        0.35 + 0.35 * np.cos(2 * np.pi * (H - 3) / 24),
        np.full(24, 0.45) + 0.05 * np.sin(2 * np.pi * H / 24),
        np.full(24, 0.12),
        0.15 + 0.65 * np.clip((H - 10) / 12, 0, 1),
    ]
    pv = [0.85 * bump(12.5, 2.6), 0.5 * bump(12.5, 2.3), 0.2 * bump(12.5, 2.0)]
    return {"WT": (np.stack(wt), (761, 473, 312, 454)), "PV": (np.stack(pv), (701, 538, 761))}


def samples(rng):
    out = {}
    for name, (tpls, counts) in templates().items():
        rows = []
        for tpl, n in zip(tpls, counts):
            noise = rng.normal(0.0, 0.04, size=(n, 24))
            if name == "PV":
                noise *= (tpl > 0.02)
            rows.append(np.clip(tpl + noise, 0.0, 1.0))
        X = np.vstack(rows)
        X = X[rng.permutation(len(X))]
        out[name] = [SamplePath(name, np.round(x, 6)) for x in X]
    return out


if __name__ == "__main__":
    series()
    s = samples(np.random.default_rng(20240501))
    write_samples_csv(OUT / "wt_samples.csv", s["WT"])
    write_samples_csv(OUT / "pv_samples.csv", s["PV"])
