"""Simulation of the n-coalescent restricted to n leaves.

Two independent schemes produce the same law:

* ``simulate_gillespie`` runs the block-counting Markov chain directly from
  the merger rates: with b blocks wait Exp(gamma_b), pick a merger size k
  with probability C(b,k) lambda_{b,k} / gamma_b, merge a uniform k-subset.
* ``simulate_poisson`` drives the mergers by a Poisson point process on
  [x_min, 1] x R+ with intensity x**-2 Lambda(dx) dt; at a point (x, t)
  every block is marked independently with probability x and the marked
  blocks merge if there are at least two.  Points below ``x_min`` are
  dropped and an upper bound on the resulting missed mergers is recorded.
  An atom of Lambda at 0 is superposed as an exact Kingman component
  (every pair merges at rate Lambda({0})).

Leaves are blocks ``0..n-1``; the block created by the i-th event gets id
``n + i``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from functools import lru_cache

from scipy import special

from .errors import SimulationError
from .measure import LambdaMeasure, LogRateRows, integrate

SCHEMES = ("gillespie", "poisson", "auto")
MISSED_MERGER_TARGET = 1e-3
MAX_EXPECTED_POINTS = 1e6


def replicate_seed(master_seed: int, replicate: int) -> int:
    """Seed of replicate ``replicate`` derived from ``master_seed``.

    Uses numpy's SeedSequence with spawn key ``(replicate,)`` and takes the
    first 64-bit word of its state, so streams for different replicates are
    independent and the mapping is stable across runs.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(replicate),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SimConfig:
    n: int
    horizon: float = math.inf
    seed: int = 0
    scheme: str = "gillespie"
    x_min: float | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned value")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.x_min is not None and not (0.0 < self.x_min < 1.0):
            raise ValueError("x_min must lie in (0, 1)")


@dataclass(frozen=True)
class MergeEvent:
    time: float
    blocks: tuple[int, ...]
    new_block: int


@dataclass(frozen=True, eq=False)
class CoalescentHistory:
    """A sample path of the n-coalescent as an ordered list of merge events."""

    n: int
    events: tuple[MergeEvent, ...]
    horizon: float = math.inf
    seed: int | None = None
    scheme: str = "gillespie"
    metadata: dict = field(default_factory=dict)

    @property
    def absorbed(self) -> bool:
        return self.n == 1 or self.block_count_final == 1

    @property
    def block_count_final(self) -> int:
        return self.n - sum(len(e.blocks) - 1 for e in self.events)

    @property
    def absorption_time(self) -> float:
        if self.n == 1:
            return 0.0
        if not self.absorbed:
            raise SimulationError("history stopped at the horizon before absorption")
        return self.events[-1].time

    def partition_at(self, t: float) -> list[tuple[int, ...]]:
        """Blocks alive at time t (events at time t included), as sorted leaf tuples."""
        members: dict[int, list[int]] = {i: [i] for i in range(self.n)}
        for e in self.events:
            if e.time > t:
                break
            merged: list[int] = []
            for blk in e.blocks:
                merged.extend(members.pop(blk))
            members[e.new_block] = merged
        return sorted(tuple(sorted(v)) for v in members.values())

    def validate(self) -> None:
        alive = set(range(self.n))
        last = 0.0
        ties = self.metadata.get("tied_times", 0)
        for i, e in enumerate(self.events):
            if not e.time > last and not (ties and e.time == last and i > 0):
                raise SimulationError(f"event {i} time {e.time} not after {last}")
            if len(e.blocks) < 2:
                raise SimulationError(f"event {i} merges fewer than two blocks")
            if not set(e.blocks) <= alive or len(set(e.blocks)) != len(e.blocks):
                raise SimulationError(f"event {i} merges blocks that are not alive")
            if e.new_block != self.n + i:
                raise SimulationError(f"event {i} creates block {e.new_block}, expected {self.n + i}")
            if e.time > self.horizon:
                raise SimulationError(f"event {i} after the horizon")
            alive -= set(e.blocks)
            alive.add(e.new_block)
            last = e.time

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "lambdatree-history/1",
            "n": self.n,
            "seed": self.seed,
            "scheme": self.scheme,
            "horizon": None if math.isinf(self.horizon) else self.horizon,
            "events": [[e.time, list(e.blocks), e.new_block] for e in self.events],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "CoalescentHistory":
        horizon = data.get("horizon")
        events = tuple(MergeEvent(float(t), tuple(int(b) for b in blocks), int(new))
                       for t, blocks, new in data["events"])
        hist = cls(int(data["n"]), events, math.inf if horizon is None else float(horizon),
                   data.get("seed"), data.get("scheme", "gillespie"), dict(data.get("metadata", {})))
        hist.validate()
        return hist

    @classmethod
    def from_json(cls, text: str) -> "CoalescentHistory":
        return cls.from_dict(json.loads(text))


# -- Gillespie scheme -----------------------------------------------------------

class MergerSizes:
    """Total merger rate gamma_b and merger-size CDF for b blocks, built lazily.

    Rows up to ``cache_rows`` are kept; larger rows are recomputed on demand
    so memory stays linear in n.
    """

    def __init__(self, measure: LambdaMeasure, n: int, cache_rows: int = 2048):
        self.rows = LogRateRows(measure, n)
        self.lg = special.gammaln(np.arange(n + 1) + 1.0)
        self.cache_rows = cache_rows
        self._cache: dict[int, tuple[float, np.ndarray]] = {}

    def __call__(self, b: int) -> tuple[float, np.ndarray]:
        hit = self._cache.get(b)
        if hit is not None:
            return hit
        k = np.arange(2, b + 1)
        log_terms = self.lg[b] - self.lg[k] - self.lg[b - k] + self.rows.row(b)
        log_gamma = special.logsumexp(log_terms)
        cdf = np.cumsum(np.exp(log_terms - log_gamma))
        cdf[-1] = 1.0
        out = (math.exp(log_gamma), cdf)
        if b <= self.cache_rows:
            self._cache[b] = out
        return out


@lru_cache(maxsize=8)
def merger_sizes(measure: LambdaMeasure, n: int) -> MergerSizes:
    return MergerSizes(measure, n)


def _take_random_subset(alive: list, k: int, u: np.ndarray) -> tuple[int, ...]:
    """Move a uniform k-subset of ``alive`` to its tail (partial Fisher-Yates) and pop it."""
    b = len(alive)
    for i in range(k):
        j = int(u[i] * (b - i))
        last = b - 1 - i
        alive[j], alive[last] = alive[last], alive[j]
    chosen = tuple(sorted(alive[b - k:]))
    del alive[b - k:]
    return chosen


def simulate_gillespie(measure: LambdaMeasure, cfg: SimConfig) -> CoalescentHistory:
    n = cfg.n
    rng = np.random.default_rng(cfg.seed)
    events: list[MergeEvent] = []
    if n > 1:
        sizes = merger_sizes(measure, n)
        alive = list(range(n))
        t = 0.0
        while len(alive) > 1:
            b = len(alive)
            rate, cdf = sizes(b)
            if not rate > 0:
                raise SimulationError(f"total merger rate vanishes with {b} blocks")
            t += rng.standard_exponential() / rate
            if t > cfg.horizon:
                break
            k = 2 + int(np.searchsorted(cdf, rng.random(), side="right"))
            k = min(k, b)
            merged = _take_random_subset(alive, k, rng.random(k))
            new = n + len(events)
            alive.append(new)
            events.append(MergeEvent(t, merged, new))
    return CoalescentHistory(n, tuple(events), cfg.horizon, cfg.seed, "gillespie", {})


# -- Poisson scheme -------------------------------------------------------------

def _power_sample(u: float, e: float, a: float, b: float) -> float:
    """Inverse CDF of the density proportional to y**e on [a, b]."""
    if e == -1.0:
        return a * (b / a) ** u
    p = e + 1.0
    return (a ** p + u * (b ** p - a ** p)) ** (1.0 / p)


class _DensityPiece:
    """x**(alpha-2) (1-x)**beta on [u, v], sampled by rejection.

    ``tail`` pieces end at 1 with beta < 0 and propose from the (1-x)**beta
    factor; other pieces propose from the power factor.
    """

    def __init__(self, alpha, beta, u, v, weight):
        self.alpha, self.beta, self.u, self.v, self.weight = alpha, beta, u, v, weight
        self.tail = v == 1.0 and beta < 0.0
        e = alpha - 2.0
        if self.tail:
            self.bound = u ** e if e < 0 else 1.0
        else:
            self.bound = (1.0 - u) ** beta if beta >= 0 else (1.0 - v) ** beta

    def sample(self, rng) -> float:
        e = self.alpha - 2.0
        while True:
            if self.tail:
                x = 1.0 - _power_sample(rng.random(), self.beta, 0.0, 1.0 - self.u)
                if x <= 0.0 or x >= 1.0:
                    continue
                accept = x ** e / self.bound
            else:
                x = _power_sample(rng.random(), e, self.u, self.v)
                accept = (1.0 - x) ** self.beta / self.bound if self.beta != 0.0 else 1.0
            if rng.random() < accept:
                return x


class PoissonPointSampler:
    """Exact sampler for Poisson points of x**-2 Lambda(dx) restricted to [x_min, 1]."""

    def __init__(self, measure: LambdaMeasure, x_min: float):
        self.x_min = x_min
        choices: list[tuple[float, object]] = []
        for a in measure.atoms:
            if a.location >= x_min:
                choices.append((a.mass / a.location ** 2, a.location))
        for wd in measure.densities:
            d = wd.density
            u, v = max(d.lo, x_min), d.hi
            if u >= v:
                continue
            cuts = [u, v]
            if v == 1.0 and d.beta < 0.0 and u < 0.5:
                cuts = [u, 0.5, v]
            single = LambdaMeasure((), (wd,))
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                marks = [p for p in np.geomspace(lo, hi, 6)[1:-1]]
                w = integrate(single, lambda x, lo=lo, hi=hi: x ** -2.0 if lo <= x <= hi else 0.0,
                              0.0, value_at_0=0.0, breakpoints=[lo, hi, *marks])
                if w > 0:
                    choices.append((w, _DensityPiece(d.alpha, d.beta, lo, hi, w)))
        self.rate = math.fsum(w for w, _ in choices)
        self._weights = np.array([w for w, _ in choices])
        self._cdf = np.cumsum(self._weights) / self.rate if choices else np.array([])
        self._items = [c for _, c in choices]

    def sample(self, rng) -> float:
        i = int(np.searchsorted(self._cdf, rng.random() , side="right"))
        item = self._items[min(i, len(self._items) - 1)]
        if isinstance(item, _DensityPiece):
            return item.sample(rng)
        return item


def missed_merger_rate_bound(measure: LambdaMeasure, n: int, x_min: float) -> float:
    """Upper bound on mergers per unit time lost by dropping points with x < x_min."""
    return n * (n - 1) / 2.0 * measure.mass_in(0.0, x_min)


def expected_absorption_time(measure: LambdaMeasure, n: int) -> float:
    """E[time to reach one block from n], from the block-counting chain."""
    if n == 1:
        return 0.0
    sizes = merger_sizes(measure, n)
    et = np.zeros(n + 1)
    for b in range(2, n + 1):
        rate, cdf = sizes(b)
        probs = np.diff(np.concatenate([[0.0], cdf]))
        # merging k blocks leaves b - k + 1
        et[b] = 1.0 / rate + float(np.dot(probs, et[b - 1:0:-1][: b - 1]))
    return float(et[n])


def default_x_min(measure: LambdaMeasure, n: int, horizon: float = math.inf,
                  target: float = MISSED_MERGER_TARGET) -> float | None:
    """Largest cutoff whose missed-merger bound over the run is at most ``target``.

    Returns None when no cutoff keeps both the bound and the expected number
    of Poisson points within budget.
    """
    s = measure.positive_support_min()
    if measure.mass_in(0.0, s) == 0.0 and s > 0.0:
        # no mass in (0, s): any cutoff at or below s is exact
        return min(s, 0.5)
    duration = horizon if math.isfinite(horizon) else expected_absorption_time(measure, n)
    for x in np.geomspace(0.5, 1e-6, 58):
        x = float(x)
        if missed_merger_rate_bound(measure, n, x) * duration <= target:
            if PoissonPointSampler(measure, x).rate * duration > MAX_EXPECTED_POINTS:
                return None
            return x
    return None


def mark_blocks(alive: list, x: float, u: np.ndarray) -> tuple[int, ...] | None:
    """Apply one Poisson point: block ``alive[i]`` is marked when ``u[i] < x``.

    Two or more marked blocks are removed from ``alive`` and returned (sorted);
    fewer than two marks leave ``alive`` untouched and return None.
    """
    marked = np.flatnonzero(u < x)
    if len(marked) < 2:
        return None
    merged = tuple(sorted(alive[i] for i in marked))
    for i in marked[::-1]:
        del alive[i]
    return merged


def simulate_poisson(measure: LambdaMeasure, cfg: SimConfig) -> CoalescentHistory:
    n = cfg.n
    x_min = cfg.x_min if cfg.x_min is not None else default_x_min(measure, n, cfg.horizon)
    if x_min is None:
        raise SimulationError("no Poisson cutoff keeps the missed-merger bound within budget")
    rng = np.random.default_rng(cfg.seed)
    sampler = PoissonPointSampler(measure, x_min)
    m0 = measure.mass_at_zero
    if sampler.rate == 0.0 and m0 == 0.0 and n > 1:
        raise SimulationError("measure has no mass above the cutoff")
    events: list[MergeEvent] = []
    alive = list(range(n))
    t = 0.0
    points = ties = 0
    while len(alive) > 1:
        b = len(alive)
        pair_rate = m0 * b * (b - 1) / 2.0
        total = sampler.rate + pair_rate
        t += rng.standard_exponential() / total
        if t > cfg.horizon:
            break
        if rng.random() * total < pair_rate:
            merged = _take_random_subset(alive, 2, rng.random(2))
        else:
            points += 1
            merged = mark_blocks(alive, sampler.sample(rng), rng.random(b))
            if merged is None:
                continue
        if events and t == events[-1].time:
            ties += 1
        new = n + len(events)
        alive.append(new)
        events.append(MergeEvent(t, merged, new))
    bound_rate = missed_merger_rate_bound(measure, n, x_min)
    duration = cfg.horizon if math.isfinite(cfg.horizon) else (events[-1].time if events else 0.0)
    meta = {
        "x_min": x_min,
        "point_rate": sampler.rate,
        "points": points,
        "missed_merger_rate_bound": bound_rate,
        "missed_merger_bound": bound_rate * duration,
        "kingman_superposition": m0 > 0,
        "tied_times": ties,
    }
    return CoalescentHistory(n, tuple(events), cfg.horizon, cfg.seed, "poisson", meta)


def simulate(measure: LambdaMeasure, cfg: SimConfig) -> CoalescentHistory:
    """Dispatch on ``cfg.scheme``.

    ``poisson`` falls back to the exact Gillespie scheme when no cutoff meets
    the missed-merger budget; ``auto`` uses the Poisson scheme only when it is
    exact (no mass of Lambda in (0, x_min)) and Gillespie otherwise.
    """
    if cfg.scheme == "gillespie":
        return simulate_gillespie(measure, cfg)
    x_min = cfg.x_min if cfg.x_min is not None else default_x_min(measure, cfg.n, cfg.horizon)
    exact = x_min is not None and missed_merger_rate_bound(measure, cfg.n, x_min) == 0.0
    if cfg.scheme == "poisson" and x_min is not None or cfg.scheme == "auto" and exact:
        return simulate_poisson(measure, SimConfig(cfg.n, cfg.horizon, cfg.seed, "poisson", x_min))
    hist = simulate_gillespie(measure, cfg)
    hist.metadata.update({"requested_scheme": cfg.scheme,
                          "fallback": "gillespie" if cfg.scheme == "poisson" else "auto"})
    return hist


# -- path functionals -----------------------------------------------------------

@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function: ``values[i]`` on [times[i-1], times[i])."""

    times: tuple[float, ...]
    values: tuple[int, ...]

    def __call__(self, t: float) -> int:
        return self.values[int(np.searchsorted(self.times, t, side="right"))]


def block_count_trajectory(history: CoalescentHistory) -> StepFunction:
    counts = [history.n]
    for e in history.events:
        counts.append(counts[-1] - (len(e.blocks) - 1))
    return StepFunction(tuple(e.time for e in history.events), tuple(counts))


def block_frequencies(history: CoalescentHistory, t: float) -> np.ndarray:
    """Frequencies |block| / n of the blocks alive at t, largest first."""
    sizes = sorted((len(b) for b in history.partition_at(t)), reverse=True)
    return np.asarray(sizes, dtype=float) / history.n


def simulate_many(measure: LambdaMeasure, cfg: SimConfig, replicates: int) -> Iterable[CoalescentHistory]:
    """Histories for replicates 0..replicates-1 with seeds split from ``cfg.seed``."""
    for r in range(replicates):
        yield simulate(measure, SimConfig(cfg.n, cfg.horizon, replicate_seed(cfg.seed, r),
                                          cfg.scheme, cfg.x_min))
