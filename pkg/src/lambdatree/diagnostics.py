"""Finite-n diagnostics of compactness for coalescent measure trees.

Each replicate simulates the coalescent once on ``max(n_grid)`` leaves.  The
tree on the first n leaves is then the n-coalescent tree (restrictions of a
coalescent are coalescents), so every n in the grid is evaluated on the same
sample path.  This is the paired-seed design: comparisons across n are made
within a replicate.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .classification import ClassifyConfig, CoalescentClass, classify
from .measure import LambdaMeasure, parse_measure
from .mmspace import (DistanceMatrixSample, UltrametricSpace, block_count, xi_epsilon)
from .simulate import SimConfig, replicate_seed, simulate

# Frozen from pilot runs (master seeds 101..105, 200 replicates, n up to 1600).
# Kingman xi ratios at n 1600/400 were 1.00..1.053 (Bolthausen-Sznitman 3.44..3.55);
# Kingman local-probe ratios were at most 1.25 on small-integer medians.  The
# default delta grid avoids delta = 0.2, where Bolthausen-Sznitman medians sit
# at 1 up to n = 1600 (the ball of leaf 0 is usually tiny at that radius).
XI_RATIO_THRESHOLD = 1.15
LOCAL_RATIO_THRESHOLD = 1.5
GROWTH_FRACTION = 0.95


@dataclass(frozen=True)
class StudyConfig:
    n_grid: tuple[int, ...] = (100, 400, 1600)
    eps_grid: tuple[float, ...] = (0.1,)
    delta_grid: tuple[float, ...] = (0.4, 0.8)
    eta_grid: tuple[float, ...] = (0.05, 0.1)
    thin_eps: float = 0.1
    thin_delta_grid: tuple[float, ...] = (0.001, 0.005, 0.02)
    replicates: int = 200
    seed: int = 1
    scheme: str = "gillespie"
    xi_ratio_threshold: float = XI_RATIO_THRESHOLD
    local_ratio_threshold: float = LOCAL_RATIO_THRESHOLD
    growth_fraction: float = GROWTH_FRACTION
    b_max: int = 10_000

    def __post_init__(self):
        for name in ("n_grid", "eps_grid", "delta_grid", "eta_grid", "thin_delta_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.n_grid) < 2 or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing with at least two entries")
        if self.n_grid[0] < 2:
            raise ValueError("n_grid entries must be at least 2")
        for name in ("eps_grid", "delta_grid", "eta_grid", "thin_delta_grid"):
            if not getattr(self, name) or min(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be non-empty and positive")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def local_pairs(self) -> list[tuple[float, float]]:
        return [(d, e) for d in self.delta_grid for e in self.eta_grid if e < d]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def rooted_restriction(tree: UltrametricSpace, m: int, delta: float) -> DistanceMatrixSample:
    """delta-restriction of the distance matrix of leaves 0..m-1, rooted at leaf 0.

    Equal to ``delta_restriction(leaf_order_sample(tree, m), delta)`` but only
    the retained submatrix is built: for an ultrametric tree the leaves within
    delta of leaf 0 are exactly those sharing its block at time delta.
    """
    lab = tree.labels_at(delta)[:m]
    keep = np.flatnonzero(lab == lab[0])
    return DistanceMatrixSample(tree.distance_matrix(keep), tuple(int(k) for k in keep), None,
                                "leaf-order", True, tree.censored)


def _replicate(args) -> dict:
    """All statistics of one replicate (a picklable unit of work)."""
    spec, cfg, r = args
    measure = parse_measure(spec) if isinstance(spec, str) else spec
    seed = replicate_seed(cfg.seed, r)
    hist = simulate(measure, SimConfig(cfg.n_grid[-1], seed=seed, scheme=cfg.scheme))
    tree = UltrametricSpace.from_history(hist)
    out = {"replicate": r, "seed": seed, "xi": {}, "N": {}, "thin": {}, "local": {}}
    for eps in cfg.eps_grid:
        out["N"][eps] = block_count(tree, eps)
    for n in cfg.n_grid:
        sub = tree.with_uniform_mass_on_first(n)
        for eps in cfg.eps_grid:
            out["xi"][(n, eps)] = xi_epsilon(sub, eps, allow_censored=True)
        lab = tree.labels_at(cfg.thin_eps)[:n]
        _, inv, counts = np.unique(lab, return_inverse=True, return_counts=True)
        ball = counts[inv] / n
        for delta in cfg.thin_delta_grid:
            out["thin"][(n, delta)] = float(np.count_nonzero(ball <= delta)) / n
        for delta in cfg.delta_grid:
            restr = None
            for eta in cfg.eta_grid:
                if eta >= delta:
                    continue
                restr = restr or rooted_restriction(tree, n, delta)
                out["local"][(n, delta, eta)] = (
                    1 if restr.size == 1 else xi_epsilon(restr, eta, allow_censored=True))
    return out


def run_replicates(measure, cfg: StudyConfig, jobs: int = 1) -> list[dict]:
    """Per-replicate statistics in replicate order (independent of ``jobs``)."""
    spec = measure.describe() if isinstance(measure, LambdaMeasure) else measure
    work = [(spec, cfg, r) for r in range(cfg.replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_replicate, work, chunksize=max(1, len(work) // (4 * jobs))))
    return [_replicate(w) for w in work]


def _summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


def xi_scaling_study(measure, cfg: StudyConfig, reps: list[dict] | None = None) -> dict:
    """xi_eps of H^n per (n, eps), with the per-replicate check xi_eps <= N(eps)."""
    reps = reps if reps is not None else run_replicates(measure, cfg)
    cells, violations = [], []
    for eps in cfg.eps_grid:
        for n in cfg.n_grid:
            xs = [r["xi"][(n, eps)] for r in reps]
            cells.append({"n": n, "eps": eps, **_summary(xs)})
        for r in reps:
            for n in cfg.n_grid:
                if r["xi"][(n, eps)] > r["N"][eps]:
                    violations.append({"replicate": r["replicate"], "n": n, "eps": eps})
    stab = {}
    for eps in cfg.eps_grid:
        med = [c["median"] for c in cells if c["eps"] == eps]
        paired = [all(a < b for a, b in zip(seq, seq[1:]))
                  for seq in ([r["xi"][(n, eps)] for n in cfg.n_grid] for r in reps)]
        stab[eps] = {
            "ratios": [b / a for a, b in zip(med, med[1:])],
            "medians_strictly_increasing": all(a < b for a, b in zip(med, med[1:])),
            "paired_increasing_fraction": float(np.mean(paired)),
        }
    n_summary = [{"eps": eps, **_summary([r["N"][eps] for r in reps])} for eps in cfg.eps_grid]
    return {"cells": cells, "stabilization": stab, "domination_violations": violations,
            "block_counts": n_summary}


def thin_point_probe(measure, cfg: StudyConfig, reps: list[dict] | None = None) -> dict:
    """Fraction of leaves whose closed thin_eps-ball has mass <= delta, per (n, delta)."""
    reps = reps if reps is not None else run_replicates(measure, cfg)
    cells = []
    for delta in cfg.thin_delta_grid:
        for n in cfg.n_grid:
            cells.append({"n": n, "eps": cfg.thin_eps, "delta": delta,
                          "mean": float(np.mean([r["thin"][(n, delta)] for r in reps])),
                          **_summary([r["thin"][(n, delta)] for r in reps])})
    return {"cells": cells}


def local_compactness_probe(measure, cfg: StudyConfig, reps: list[dict] | None = None) -> dict:
    """xi_eta of the delta-restriction rooted at leaf 0, per (n, delta, eta)."""
    reps = reps if reps is not None else run_replicates(measure, cfg)
    cells, trend = [], {}
    for delta, eta in cfg.local_pairs:
        med = []
        for n in cfg.n_grid:
            s = _summary([r["local"][(n, delta, eta)] for r in reps])
            cells.append({"n": n, "delta": delta, "eta": eta, **s})
            med.append(s["median"])
        trend[f"{delta!r},{eta!r}"] = {
            "ratios": [b / a for a, b in zip(med, med[1:])],
            "medians_strictly_increasing": all(a < b for a, b in zip(med, med[1:])),
        }
    return {"cells": cells, "trend": trend}


@dataclass
class CompactnessReport:
    measure: str
    analytic_class: str
    classification: dict
    config: dict
    xi_study: dict
    thin_probe: dict
    local_probe: dict
    verdict: str
    consistent: bool
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def rows(self) -> list[dict]:
        """One row per grid cell per statistic, for plotting."""
        out = []
        for c in self.xi_study["cells"]:
            out.append(_row("xi", c["n"], eps=c["eps"], stats=c))
        for c in self.xi_study["block_counts"]:
            out.append(_row("N", self.config["n_grid"][-1], eps=c["eps"], stats=c))
        for c in self.thin_probe["cells"]:
            out.append(_row("thin_fraction", c["n"], eps=c["eps"], delta=c["delta"], stats=c))
        for c in self.local_probe["cells"]:
            out.append(_row("local_xi", c["n"], delta=c["delta"], eta=c["eta"], stats=c))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["statistic", "n", "eps", "delta", "eta", "median", "q1", "q3", "min", "max",
                "replicates", "seed"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            r.update(replicates=self.config["replicates"], seed=self.config["seed"])
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in cols})
        return buf.getvalue()


def _row(stat, n, *, eps=None, delta=None, eta=None, stats):
    return {"statistic": stat, "n": n, "eps": eps, "delta": delta, "eta": eta,
            **{k: stats[k] for k in ("median", "q1", "q3", "min", "max")}}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {(repr(k) if isinstance(k, float) else str(k)): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def empirical_verdicts(cfg: StudyConfig, xi: dict, local: dict) -> dict:
    """Stabilization and growth flags computed from the pre-registered statistics."""
    stab = xi["stabilization"].values()
    xi_stable = all(s["ratios"][-1] <= cfg.xi_ratio_threshold for s in stab)
    xi_growing = all(s["medians_strictly_increasing"]
                     and s["paired_increasing_fraction"] >= cfg.growth_fraction for s in stab)
    trends = local["trend"].values()
    local_stable = all(t["ratios"][-1] <= cfg.local_ratio_threshold for t in trends)
    local_growing = bool(local["trend"]) and all(t["medians_strictly_increasing"] for t in trends)
    return {"xi_stable": xi_stable, "xi_growing": xi_growing,
            "local_stable": local_stable, "local_growing": local_growing}


def compactness_report(measure, cfg: StudyConfig, *, jobs: int = 1,
                    classify_config: ClassifyConfig | None = None) -> CompactnessReport:
    """Analytic class cross-referenced against the finite-n compactness diagnostics."""
    if isinstance(measure, str):
        label, measure = measure, parse_measure(measure)
    else:
        label = measure.describe()
    cls = classify(measure, classify_config or ClassifyConfig(b_max=cfg.b_max), label=label)
    reps = run_replicates(measure, cfg, jobs)
    xi = xi_scaling_study(measure, cfg, reps)
    thin = thin_point_probe(measure, cfg, reps)
    local = local_compactness_probe(measure, cfg, reps)
    flags = empirical_verdicts(cfg, xi, local)
    warnings = []
    if xi["domination_violations"]:
        warnings.append(f"xi_eps exceeded N(eps) in {len(xi['domination_violations'])} cases")
    combined = cls.combined
    if combined == CoalescentClass.COMES_DOWN:
        consistent = flags["xi_stable"] and flags["local_stable"]
        verdict = "consistent-with-compact" if consistent else \
            "DISAGREEMENT: analytic class comes down from infinity but xi does not stabilize"
    elif combined == CoalescentClass.DUST_FREE_INFINITE:
        consistent = flags["xi_growing"] and flags["local_growing"]
        verdict = "consistent-with-not-locally-compact" if consistent else \
            "DISAGREEMENT: analytic class stays infinite but xi does not grow at every probed scale"
    elif combined == CoalescentClass.HAS_DUST:
        consistent = True
        verdict = "has-dust: no limit tree; diagnostics reported for information only"
        warnings.append("measure has dust: H^n does not converge Gromov-weakly, so the "
                        "finite-n statistics describe no limiting mm-space")
    else:
        consistent = False
        verdict = f"analytic classification {combined.value}; no compactness statement"
    if xi["domination_violations"]:
        consistent = False
    return CompactnessReport(label, combined.value, cls.to_dict(),
                             {**cfg.to_dict(), "flags": flags}, xi, thin, local, verdict,
                             consistent, warnings)
