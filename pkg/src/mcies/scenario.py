"""Renewable scenario reduction.

Sample paths (per-unit, one value per hour) are grouped with Kmeans++, the
cluster count is picked by the Davies-Bouldin index and the WT and PV
typical days are crossed into a joint, probability-weighted scenario set.
Adversarial training is out of scope here; its objectives are exposed as
plain batch statistics so that externally trained generators can be audited.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

T = 24
SOURCES = ("WT", "PV")


class SampleFileError(ValueError):
    """Malformed sample CSV; the message carries ``path:line``."""


class ClusteringError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplePath:
    source: str
    values: np.ndarray

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.shape[0] != T:
            raise ValueError(f"sample path must have {T} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample path contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("per-unit sample path must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ClusterResult:
    """Centroids, hard assignment and per-cluster sample counts."""

    source: str
    centroids: np.ndarray
    assignment: np.ndarray
    counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        a = np.asarray(self.assignment, dtype=int)
        k = c.shape[0]
        counts = tuple(int(n) for n in np.bincount(a, minlength=k)) if a.size else tuple(self.counts)
        if self.counts and tuple(self.counts) != counts and a.size:
            raise ValueError("counts disagree with assignment")
        if len(counts) != k:
            raise ValueError("one count per centroid required")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "counts", counts)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_samples(self) -> int:
        return int(sum(self.counts))

    @property
    def fractions(self) -> list[Fraction]:
        n = self.n_samples
        return [Fraction(c, n) for c in self.counts]

    @property
    def probabilities(self) -> np.ndarray:
        n = self.n_samples
        return np.array([c / n for c in self.counts])

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "k": self.k,
            "n_samples": self.n_samples,
            "counts": list(self.counts),
            "probabilities": [repr(float(p)) for p in self.probabilities],
            "centroids": [[repr(float(x)) for x in row] for row in self.centroids],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterResult":
        cents = np.array([[float(x) for x in row] for row in d["centroids"]])
        return cls(d["source"], cents, np.zeros(0, dtype=int), tuple(d["counts"]))


@dataclass(frozen=True)
class Scenario:
    wt: np.ndarray
    pv: np.ndarray
    probability: float
    wt_index: int
    pv_index: int
    fraction: Fraction


@dataclass(frozen=True)
class JointScenarioSet:
    scenarios: tuple[Scenario, ...]
    s_wt: int
    s_pv: int

    @property
    def s_max(self) -> int:
        return len(self.scenarios)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.probability for s in self.scenarios])

    def wt_matrix(self) -> np.ndarray:
        return np.stack([s.wt for s in self.scenarios])

    def pv_matrix(self) -> np.ndarray:
        return np.stack([s.pv for s in self.scenarios])

    def to_dict(self) -> dict:
        return {
            "s_wt": self.s_wt,
            "s_pv": self.s_pv,
            "s_max": self.s_max,
            "scenarios": [
                {
                    "wt_cluster": s.wt_index,
                    "pv_cluster": s.pv_index,
                    "probability": repr(float(s.probability)),
                    "fraction": str(s.fraction),
                    "wt": [repr(float(x)) for x in s.wt],
                    "pv": [repr(float(x)) for x in s.pv],
                }
                for s in self.scenarios
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointScenarioSet":
        scen = tuple(
            Scenario(
                wt=np.array([float(x) for x in s["wt"]]),
                pv=np.array([float(x) for x in s["pv"]]),
                probability=float(s["probability"]),
                wt_index=int(s["wt_cluster"]),
                pv_index=int(s["pv_cluster"]),
                fraction=Fraction(s["fraction"]),
            )
            for s in d["scenarios"]
        )
        return cls(scen, int(d["s_wt"]), int(d["s_pv"]))

    @classmethod
    def deterministic(cls, wt: Sequence[float], pv: Sequence[float]) -> "JointScenarioSet":
        """Single scenario with probability one."""
        s = Scenario(np.asarray(wt, float), np.asarray(pv, float), 1.0, 0, 0, Fraction(1))
        return cls((s,), 1, 1)


@dataclass(frozen=True)
class LossBatch:
    d_real: Sequence[float]
    d_fake: Sequence[float]
    grad_norms: Sequence[float] = ()
    lam: float = 10.0


# ---------------------------------------------------------------------------
# adversarial objectives as batch statistics
# ---------------------------------------------------------------------------


def _nonempty(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def gan_losses(batch: LossBatch) -> tuple[float, float]:
    """Generator and discriminator losses of the original GAN.

    Returns ``(L_G, L_D)`` with ``L_G = mean log(1 - D(G(z)))`` and
    ``L_D = mean log D(x) + mean log(1 - D(G(z)))``.  Discriminator outputs
    must be probabilities in the open interval (0, 1).
    """
    real = _nonempty(batch.d_real, "d_real")
    fake = _nonempty(batch.d_fake, "d_fake")
    for name, a in (("d_real", real), ("d_fake", fake)):
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError(f"{name} must lie strictly inside (0, 1)")
    lg = float(np.mean(np.log1p(-fake)))
    ld = float(np.mean(np.log(real))) + lg
    return lg, ld


def wgan_gp_objective(batch: LossBatch) -> float:
    """Critic gap plus gradient penalty, ``E[D(x)] - E[D(G(z))] + lam E[(|g| - 1)^2]``."""
    real = _nonempty(batch.d_real, "d_real")
    fake = _nonempty(batch.d_fake, "d_fake")
    g = _nonempty(batch.grad_norms, "grad_norms")
    if np.any(g < 0):
        raise ValueError("gradient norms must be non-negative")
    if batch.lam < 0:
        raise ValueError("penalty weight must be non-negative")
    gap = float(np.mean(real)) - float(np.mean(fake))
    if batch.lam == 0:
        return gap
    return gap + float(batch.lam) * float(np.mean((g - 1.0) ** 2))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def _as_matrix(samples) -> tuple[str, np.ndarray]:
    if isinstance(samples, np.ndarray):
        raise TypeError("pass SamplePath objects so the source tag is known")
    samples = list(samples)
    if not samples:
        raise ClusteringError("no samples")
    sources = {s.source for s in samples}
    if len(sources) != 1:
        raise ClusteringError(f"mixed sources {sorted(sources)}")
    X = np.stack([s.values for s in samples])
    return sources.pop(), X


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences rather than the expanded dot-product form, so that
    # exact duplicates get distance 0 and results do not depend on BLAS order
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _seed_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(rest.size)])
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int = 300):
    k = C.shape[0]
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(X, C), axis=1)
        counts = np.bincount(new, minlength=k)
        while np.any(counts == 0):
            # empty cluster: move it onto the sample farthest from its centroid
            empty = int(np.flatnonzero(counts == 0)[0])
            own = ((X - C[new]) ** 2).sum(axis=1)
            # a sample that is alone in its cluster cannot be moved
            own[counts[new] <= 1] = -1.0
            far = int(np.argmax(own))
            C[empty] = X[far]
            new[far] = empty
            counts = np.bincount(new, minlength=k)
        for j in range(k):
            C[j] = X[new == j].mean(axis=0)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    # final assignment against final centroids
    labels = np.argmin(_sq_dist(X, C), axis=1)
    return C, labels


def kmeans_pp(samples: Iterable[SamplePath], k: int, seed: int, n_init: int = 10) -> ClusterResult:
    """Kmeans++ seeding followed by Lloyd iterations.

    ``n_init`` independent seedings are drawn from one generator seeded with
    ``seed``; the run with the lowest within-cluster sum of squares wins.
    """
    source, X = _as_matrix(samples)
    n = X.shape[0]
    if k < 1:
        raise ClusteringError("k must be at least 1")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of samples ({n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        C, labels = _lloyd(X, _seed_pp(X, k, rng))
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            continue
        inertia = float(((X - C[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, C, labels)
    if best is None:
        raise ClusteringError("every restart produced an empty cluster")
    return ClusterResult(source, best[1], best[2])


def davies_bouldin(samples: Iterable[SamplePath], result: ClusterResult) -> float:
    _, X = _as_matrix(samples)
    C, labels = result.centroids, result.assignment
    k = C.shape[0]
    present = [j for j in range(k) if np.any(labels == j)]
    if len(present) < 2:
        raise ClusteringError("Davies-Bouldin index needs at least two non-empty clusters")
    s = np.array([np.sqrt(((X[labels == j] - C[j]) ** 2).sum(axis=1)).mean() for j in present])
    Cp = C[present]
    d = np.sqrt(((Cp[:, None, :] - Cp[None, :, :]) ** 2).sum(axis=2))
    m = len(present)
    off = ~np.eye(m, dtype=bool)
    if np.any(d[off] == 0.0):
        raise ClusteringError("coincident centroids make the Davies-Bouldin index undefined")
    ratio = np.where(off, (s[:, None] + s[None, :]) / np.where(off, d, 1.0), -np.inf)
    return float(ratio.max(axis=1).sum() / m)


def db_sweep(samples, k_range: Iterable[int], seed: int) -> list[tuple[int, float, ClusterResult]]:
    samples = list(samples)
    rows = []
    for k in k_range:
        res = kmeans_pp(samples, k, seed)
        rows.append((k, davies_bouldin(samples, res), res))
    return rows


def select_cluster_count(samples, k_range: Iterable[int], seed: int) -> tuple[int, ClusterResult]:
    """Cluster count with the lowest Davies-Bouldin index (ties go to the smaller k)."""
    samples = list(samples)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ClusteringError("empty k range")
    if ks[0] < 2 or ks[-1] > len(samples):
        raise ClusteringError(f"k range must lie within [2, {len(samples)}]")
    best = None
    for k, db, res in db_sweep(samples, ks, seed):
        if best is None or db < best[1]:
            best = (k, db, res)
    return best[0], best[2]


def joint_scenarios(wt: ClusterResult, pv: ClusterResult) -> JointScenarioSet:
    if wt.source == pv.source:
        raise ClusteringError("joint scenarios need one WT and one PV clustering")
    if wt.source != "WT":
        wt, pv = pv, wt
    scen = []
    for i, (cw, fw) in enumerate(zip(wt.centroids, wt.fractions)):
        for j, (cp, fp) in enumerate(zip(pv.centroids, pv.fractions)):
            f = fw * fp
            scen.append(Scenario(cw.copy(), cp.copy(), float(f), i, j, f))
    return JointScenarioSet(tuple(scen), wt.k, pv.k)


# ---------------------------------------------------------------------------
# fidelity of generated paths
# ---------------------------------------------------------------------------


def autocorrelation(x: Sequence[float], lag: int) -> float:
    x = np.asarray(x, dtype=float)
    if not 0 <= lag < x.size:
        raise ValueError("lag out of range")
    xc = x - x.mean()
    denom = float((xc * xc).sum())
    if denom == 0.0:
        if lag == 0:
            return 1.0
        raise ValueError("autocorrelation undefined for a constant series at non-zero lag")
    return float((xc[: x.size - lag] * xc[lag:]).sum() / denom)


def scenario_fidelity_metrics(generated, reference_centroid):
    """Autocorrelation of the generated path and its normalized error.

    The error at each hour is ``|gen - ref| / max(ref)``.
    """
    g = np.asarray(getattr(generated, "values", generated), dtype=float)
    r = np.asarray(getattr(reference_centroid, "values", reference_centroid), dtype=float)
    if g.shape != r.shape:
        raise ValueError("paths must have equal length")
    acf = np.array([autocorrelation(g, h) for h in range(g.size)])
    peak = float(r.max())
    if peak <= 0.0:
        raise ValueError("reference path has no positive value to normalise by")
    return acf, np.abs(g - r) / peak


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def read_samples_csv(path) -> list[SamplePath]:
    """Read ``source,h1..h24`` rows of per-unit values."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SampleFileError(f"{path}:1: empty file")
        if len(header) != T + 1 or header[0].strip().lower() != "source":
            raise SampleFileError(f"{path}:1: expected header 'source,h1..h{T}'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != T + 1:
                raise SampleFileError(f"{path}:{lineno}: expected {T + 1} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise SampleFileError(f"{path}:{lineno}: {exc}") from None
            try:
                out.append(SamplePath(row[0].strip().upper(), np.array(vals)))
            except ValueError as exc:
                raise SampleFileError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise SampleFileError(f"{path}: no sample rows")
    return out


def write_samples_csv(path, samples: Sequence[SamplePath]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [f"h{t}" for t in range(1, T + 1)])
        for s in samples:
            w.writerow([s.source] + [f"{v:.6f}" for v in s.values])


def dump_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
