"""Finite metric measure spaces and their geometric functionals.

Two representations:

* ``UltrametricSpace`` is the tree of a coalescent history: leaves are the
  initial lines, ``r(i, j)`` is the time at which i and j first share a
  block.  Functionals use the block structure directly (balls are blocks).
* ``FiniteMmSpace`` is an explicit distance matrix with point masses.

Conventions used throughout: balls are closed, ``B_eps(x) = {y : r(x,y) <= eps}``;
a set is eps-separated when all pairwise distances are strictly greater
than eps.  Only points of positive mass belong to the support.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CensoredDistanceError, SearchBudgetExceeded
from .simulate import CoalescentHistory

DEFAULT_NODE_BUDGET = 200_000
METRIC_RTOL = 1e-12


def _check_masses(masses, m: int) -> np.ndarray:
    w = np.asarray(masses, dtype=float)
    if w.shape != (m,):
        raise ValueError(f"expected {m} masses, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("masses must be finite and non-negative")
    if abs(math.fsum(w) - 1.0) > 1e-9:
        raise ValueError(f"masses must sum to 1, got {math.fsum(w)}")
    return w


# -- ultrametric trees -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UltrametricSpace:
    """Coalescent tree on ``n`` leaves with leaf masses.

    Node ids follow the history: leaves ``0..n-1``, the i-th event creates
    node ``n + i`` at height equal to the event time.  Pairs of leaves that
    never merge before the horizon get distance ``horizon`` and are marked
    censored.
    """

    n: int
    parent: np.ndarray
    height: np.ndarray
    masses: np.ndarray
    horizon: float = math.inf
    censored: bool = False
    children: tuple = field(default=(), repr=False)

    @classmethod
    def from_history(cls, history: CoalescentHistory, masses=None) -> "UltrametricSpace":
        n = history.n
        size = n + len(history.events)
        parent = np.full(size, -1, dtype=np.int64)
        height = np.zeros(size)
        children = []
        for e in history.events:
            parent[list(e.blocks)] = e.new_block
            height[e.new_block] = e.time
            children.append(tuple(e.blocks))
        w = np.full(n, 1.0 / n) if masses is None else _check_masses(masses, n)
        censored = not history.absorbed
        horizon = history.horizon if censored else math.inf
        return cls(n, parent, height, w, horizon, censored, tuple(children))

    @property
    def size(self) -> int:
        return self.n

    @property
    def events(self) -> int:
        return len(self.children)

    def with_masses(self, masses) -> "UltrametricSpace":
        return UltrametricSpace(self.n, self.parent, self.height, _check_masses(masses, self.n),
                                self.horizon, self.censored, self.children)

    def with_uniform_mass_on_first(self, m: int) -> "UltrametricSpace":
        """Masses 1/m on leaves 0..m-1 and 0 elsewhere (the H^m subspace)."""
        if not 1 <= m <= self.n:
            raise ValueError(f"m must lie in [1, {self.n}]")
        w = np.zeros(self.n)
        w[:m] = 1.0 / m
        return self.with_masses(w)

    def labels_at(self, t: float) -> np.ndarray:
        """Node id of the block containing each leaf at time t (events at t included)."""
        lab = np.arange(self.n)
        while True:
            p = self.parent[lab]
            move = p >= 0
            move[move] = self.height[p[move]] <= t
            if not move.any():
                return lab
            lab = np.where(move, p, lab)

    def distance(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        anc = set()
        a = i
        while a >= 0:
            anc.add(a)
            a = self.parent[a]
        b = j
        while b >= 0:
            if b in anc:
                return float(self.height[b])
            b = self.parent[b]
        return self.horizon

    @cached_property
    def _leaf_order(self):
        """Depth-first rank of each leaf and each leaf's distance to its predecessor.

        In this order r(order[a], order[b]) = max(gaps[a+1..b]) for a < b, the
        comb representation of an ultrametric.
        """
        roots = [v for v in range(len(self.parent)) if self.parent[v] < 0]
        order, gaps = [], []
        stack = [(v, self.horizon) for v in reversed(roots)]
        stack[-1] = (stack[-1][0], 0.0)
        while stack:
            v, tag = stack.pop()
            if v < self.n:
                order.append(v)
                gaps.append(tag)
                continue
            kids = self.children[v - self.n]
            h = float(self.height[v])
            for c in reversed(kids[1:]):
                stack.append((c, h))
            stack.append((kids[0], tag))
        rank = np.empty(self.n, dtype=np.int64)
        rank[order] = np.arange(self.n)
        return rank, np.asarray(gaps)

    def distance_matrix(self, indices=None) -> np.ndarray:
        """Distances among the given leaves (all leaves by default), with repeats allowed."""
        idx = np.arange(self.n) if indices is None else np.asarray(indices, dtype=np.int64)
        m = len(idx)
        rank, gaps = self._leaf_order
        pos = rank[idx]
        perm = np.argsort(pos, kind="stable")
        p = pos[perm]
        g = np.zeros(max(m - 1, 0))
        for a in np.flatnonzero(p[1:] > p[:-1]):
            g[a] = gaps[p[a] + 1: p[a + 1] + 1].max()
        sorted_d = np.zeros((m, m))
        for a in range(m - 1):
            row = np.maximum.accumulate(g[a:])
            sorted_d[a, a + 1:] = row
            sorted_d[a + 1:, a] = row
        d = np.empty((m, m))
        d[np.ix_(perm, perm)] = sorted_d
        return d

    @cached_property
    def diameter(self) -> float:
        return self.horizon if self.censored else float(self.height.max(initial=0.0))

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.masses > 0)

    def to_finite(self) -> "FiniteMmSpace":
        return FiniteMmSpace(self.distance_matrix(), self.masses, censored=self.censored,
                             ultrametric=True)

    def merge_heights(self) -> np.ndarray:
        return self.height[self.n:]

    def block_mass_profile(self, delta: float):
        """Piecewise-constant thin-mass function eps -> mu{x : mu(B_eps(x)) <= delta}.

        Returns (breakpoints, values): ``values[0]`` holds on [0, breakpoints[0])
        and ``values[k]`` on [breakpoints[k-1], breakpoints[k]).
        """
        w = self.masses
        pos = w > 0
        k = int(pos.sum())
        if np.all(w[pos] == w[pos][0]):
            # uniform on the support: work with leaf counts so ties with delta are exact
            unit, div = pos.astype(float), float(k)
        else:
            unit, div = w, 1.0
        mass = np.zeros(self.n + self.events)
        mass[: self.n] = unit
        light = pos & (unit / div <= delta)
        thin = math.fsum(unit[light])
        n_thin = int(light.sum())
        times, values = [], [thin / div]
        for i, blocks in enumerate(self.children):
            node = self.n + i
            bm = [mass[b] for b in blocks]
            total = math.fsum(bm)
            mass[node] = total
            gone = [m for m in bm if 0 < m and m / div <= delta]
            thin -= math.fsum(gone)
            n_thin -= len(gone)
            if 0 < total and min(total / div, 1.0) <= delta:
                thin += total
                n_thin += 1
            # the block count keeps "no thin points" exact despite rounding
            thin = max(thin, 0.0) if n_thin else 0.0
            t = float(self.height[node])
            if times and times[-1] == t:
                values[-1] = thin / div
            else:
                times.append(t)
                values.append(thin / div)
        if self.censored and values[-1] > 0:
            # beyond the horizon nothing is known; every ball is the whole space
            times.append(self.horizon)
            values.append(0.0 if delta < 1.0 else 1.0)
        return np.asarray(times), np.asarray(values)


# -- explicit finite spaces ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiniteMmSpace:
    """Finite metric space given by a distance matrix, with probability masses."""

    dist: np.ndarray
    masses: np.ndarray
    censored: bool = False
    ultrametric: bool = False

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] == 0:
            raise ValueError("distance matrix must be square and non-empty")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("distances must be finite and non-negative")
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0):
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        if not satisfies_triangle(d):
            raise ValueError("distance matrix violates the triangle inequality")
        object.__setattr__(self, "dist", d)
        object.__setattr__(self, "masses", _check_masses(self.masses, d.shape[0]))
        if not self.ultrametric and is_ultrametric(d):
            object.__setattr__(self, "ultrametric", True)

    @classmethod
    def uniform(cls, dist) -> "FiniteMmSpace":
        m = np.asarray(dist).shape[0]
        return cls(dist, np.full(m, 1.0 / m))

    @property
    def size(self) -> int:
        return self.dist.shape[0]

    def distance_matrix(self, indices=None) -> np.ndarray:
        if indices is None:
            return self.dist
        idx = np.asarray(indices, dtype=np.int64)
        return self.dist[np.ix_(idx, idx)]

    def distance(self, i: int, j: int) -> float:
        return float(self.dist[i, j])

    @property
    def diameter(self) -> float:
        return float(self.dist.max())

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.masses > 0)


def satisfies_triangle(d: np.ndarray, rtol: float = METRIC_RTOL) -> bool:
    """True if r(i,k) <= r(i,j) + r(j,k) for all triples (up to rtol)."""
    d = np.asarray(d, dtype=float)
    tol = rtol * max(1.0, float(d.max(initial=0.0)))
    for j in range(d.shape[0]):
        if np.any(d > d[:, j][:, None] + d[j, :][None, :] + tol):
            return False
    return True


def is_ultrametric(d: np.ndarray, rtol: float = METRIC_RTOL) -> bool:
    """True if r(i,k) <= max(r(i,j), r(j,k)) for all triples (exact up to rtol)."""
    d = np.asarray(d, dtype=float)
    if d.shape[0] > 400:
        raise ValueError("ultrametric check is cubic; matrix too large")
    tol = rtol * max(1.0, float(d.max(initial=0.0)))
    for j in range(d.shape[0]):
        if np.any(d > np.maximum(d[:, j][:, None], d[j, :][None, :]) + tol):
            return False
    return True


def tree_from_history(history: CoalescentHistory, *, allow_censored: bool = True) -> UltrametricSpace:
    """The ultrametric tree of a history with uniform leaf masses 1/n."""
    tree = UltrametricSpace.from_history(history)
    if tree.censored and not allow_censored:
        raise CensoredDistanceError("history stops at the horizon before absorption")
    return tree


def _refuse_censored(space, allow_censored: bool):
    if getattr(space, "censored", False) and not allow_censored:
        raise CensoredDistanceError(
            "distances are censored at the horizon; pass allow_censored=True for lower-bound semantics")


# -- samples ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistanceMatrixSample:
    """Distance matrix of sampled points; row/column 0 is the root of restrictions."""

    matrix: np.ndarray
    indices: tuple[int, ...]
    seed: int | None = None
    source: str = ""
    ultrametric: bool = False
    censored: bool = False

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def to_csv(self) -> str:
        return matrix_to_csv(self.matrix, self.indices)

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "seed": self.seed, "source": self.source,
                "ultrametric": self.ultrametric, "censored": self.censored,
                "matrix": self.matrix.tolist()}


def sample_distance_matrix(space, m: int, seed: int | None = None) -> DistanceMatrixSample:
    """Distance matrix of ``m`` points drawn i.i.d. (with replacement) from the space's masses."""
    if m < 2:
        raise ValueError("m must be at least 2")
    rng = np.random.default_rng(seed)
    idx = rng.choice(space.size, size=m, replace=True, p=space.masses)
    mat = space.distance_matrix(idx)
    return DistanceMatrixSample(mat, tuple(int(i) for i in idx), seed, type(space).__name__,
                                isinstance(space, UltrametricSpace) or space.ultrametric,
                                space.censored)


def leaf_order_sample(tree: UltrametricSpace, m: int) -> DistanceMatrixSample:
    """Distances among leaves 0..m-1.

    The leaves of an exchangeable coalescent are themselves an i.i.d. sample
    from the limiting sampling measure, so this is the natural distance
    matrix sample of the limit tree.
    """
    idx = np.arange(m)
    return DistanceMatrixSample(tree.distance_matrix(idx), tuple(range(m)), None,
                                "leaf-order", True, tree.censored)


def delta_restriction(sample: DistanceMatrixSample, delta: float) -> DistanceMatrixSample:
    """Keep index 0 and every j with r[0, j] <= delta, in order."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    keep = np.concatenate([[0], 1 + np.flatnonzero(sample.matrix[0, 1:] <= delta)])
    return DistanceMatrixSample(sample.matrix[np.ix_(keep, keep)],
                                tuple(sample.indices[k] for k in keep), sample.seed,
                                sample.source, sample.ultrametric, sample.censored)


# -- distributions -----------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteDistribution:
    support: np.ndarray
    probs: np.ndarray

    def mass_at(self, x: float) -> float:
        hit = self.support == x
        return float(self.probs[hit].sum())

    def cdf(self, x: float) -> float:
        return float(self.probs[self.support <= x].sum())

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "probs": self.probs.tolist()}


def distance_distribution(space) -> DiscreteDistribution:
    """Law of r(X, Y) for X, Y independent with the space's masses."""
    w = space.masses
    if isinstance(space, UltrametricSpace):
        mass = np.zeros(space.n + space.events)
        mass[: space.n] = w
        vals = {0.0: float(np.dot(w, w))}
        for i, blocks in enumerate(space.children):
            bm = mass[list(blocks)]
            total = bm.sum()
            mass[space.n + i] = total
            pair = total * total - float(np.dot(bm, bm))
            t = float(space.height[space.n + i])
            if pair > 0:
                vals[t] = vals.get(t, 0.0) + pair
        rest = 1.0 - math.fsum(vals.values())
        if space.censored and rest > 0:
            vals[space.horizon] = vals.get(space.horizon, 0.0) + rest
        support = np.array(sorted(vals))
        return DiscreteDistribution(support, np.array([vals[s] for s in support]))
    d = space.dist
    outer = np.outer(w, w)
    support, inv = np.unique(d, return_inverse=True)
    probs = np.bincount(inv.ravel(), weights=outer.ravel(), minlength=len(support))
    keep = probs > 0
    return DiscreteDistribution(support[keep], probs[keep])


# -- balls and moduli ----------------------------------------------------------------

def ball_mass(space, i: int, eps: float) -> float:
    """mu(B_eps(x_i)) with the closed ball."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return float(ball_masses(space, eps)[i])


def ball_masses(space, eps: float) -> np.ndarray:
    """Vector of closed-ball masses around every point.

    When the masses are uniform on the support the result is the correctly
    rounded ``count / k``, so comparisons against delta = j/k are exact.
    """
    w = space.masses
    pos = w > 0
    k = int(pos.sum())
    # uniform masses: count/k is exact, summing k copies of 1/k is not
    uniform = np.all(w[pos] == w[pos][0])
    if isinstance(space, UltrametricSpace):
        _, inv = np.unique(space.labels_at(eps), return_inverse=True)
        if uniform:
            return np.bincount(inv, weights=pos)[inv] / k
        return np.minimum(np.bincount(inv, weights=w)[inv], 1.0)
    within = space.dist <= eps
    if uniform:
        return (within.astype(np.int64) @ pos.astype(np.int64)) / k
    # rounding may push a full ball just above 1
    return np.minimum(within.astype(float) @ w, 1.0)


def thin_mass(space, eps: float, delta: float) -> float:
    """mu{x : mu(B_eps(x)) <= delta}."""
    bm = ball_masses(space, eps)
    w = space.masses
    return float(w[(bm <= delta) & (w > 0)].sum())


def thin_profile(space, delta: float):
    """Breakpoints and values of eps -> thin_mass(space, eps, delta) (right-continuous)."""
    if isinstance(space, UltrametricSpace):
        return space.block_mass_profile(delta)
    cuts = np.unique(space.dist[space.dist > 0])
    vals = [thin_mass(space, 0.0, delta)] + [thin_mass(space, c, delta) for c in cuts]
    return cuts, np.asarray(vals)


def v_delta(space, delta: float, *, allow_censored: bool = False) -> float:
    """inf{eps > 0 : mu{x : mu(B_eps(x)) <= delta} <= eps}, computed exactly."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    _refuse_censored(space, allow_censored)
    cuts, vals = thin_profile(space, delta)
    starts = np.concatenate([[0.0], cuts])
    ends = np.concatenate([cuts, [np.inf]])
    best = np.inf
    for a, b, t in zip(starts, ends, vals):
        cand = max(a, t)
        if cand < b:
            best = min(best, cand)
    return float(best)


def v_tilde_delta(space, delta: float, *, allow_censored: bool = False) -> float:
    """inf{eps > 0 : mu{x : mu(B_eps(x)) <= delta} = 0}; inf if the set is never empty."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    _refuse_censored(space, allow_censored)
    cuts, vals = thin_profile(space, delta)
    starts = np.concatenate([[0.0], cuts])
    zero = np.flatnonzero(vals == 0)
    return float(starts[zero[0]]) if len(zero) else math.inf


# -- separated sets and coverings ---------------------------------------------------

def _support_matrix(space) -> np.ndarray:
    if isinstance(space, DistanceMatrixSample):
        return space.matrix
    return space.distance_matrix(space.support())


def _ultrametric_classes(d: np.ndarray, eps: float) -> int:
    """Number of classes of the equivalence relation r <= eps (ultrametric input)."""
    left = np.ones(d.shape[0], dtype=bool)
    count = 0
    while left.any():
        i = int(np.argmax(left))
        left &= d[i] > eps
        count += 1
    return count


def greedy_separated(d: np.ndarray, eps: float) -> list[int]:
    """A maximal eps-separated set, chosen greedily in index order."""
    chosen: list[int] = []
    for i in range(d.shape[0]):
        if all(d[i, j] > eps for j in chosen):
            chosen.append(i)
    return chosen


def greedy_cover(d: np.ndarray, radius: float) -> int:
    """Size of a greedy cover by closed balls centred at points of the set."""
    uncovered = np.ones(d.shape[0], dtype=bool)
    count = 0
    within = d <= radius
    while uncovered.any():
        gain = within[:, uncovered].sum(axis=1)
        c = int(np.argmax(gain))
        uncovered &= ~within[c]
        count += 1
    return count


def xi_bounds(space, eps: float) -> tuple[int, int]:
    """Cheap certified bounds: a greedy separated set and a greedy eps/2 cover."""
    d = _support_matrix(space)
    return len(greedy_separated(d, eps)), greedy_cover(d, eps / 2.0)


def _max_clique(adj: np.ndarray, lower: list[int], upper: int, budget: int) -> list[int]:
    """Maximum clique by branch and bound with greedy colouring bounds."""
    best = list(lower)
    nodes = 0
    neighbours = [np.flatnonzero(adj[v]) for v in range(adj.shape[0])]
    nbr_sets = [set(nb.tolist()) for nb in neighbours]

    def colour_order(cands: list[int]):
        colours: list[list[int]] = []
        for v in sorted(cands, key=lambda v: -len(nbr_sets[v])):
            for cls in colours:
                if not any(u in nbr_sets[v] for u in cls):
                    cls.append(v)
                    break
            else:
                colours.append([v])
        order, bound = [], []
        for c, cls in enumerate(colours, start=1):
            order.extend(cls)
            bound.extend([c] * len(cls))
        return order, bound

    def expand(clique: list[int], cands: list[int]):
        nonlocal best, nodes
        order, bound = colour_order(cands)
        for idx in range(len(order) - 1, -1, -1):
            if len(best) >= upper:
                return
            if len(clique) + bound[idx] <= len(best):
                return
            nodes += 1
            if nodes > budget:
                raise _BudgetHit
            v = order[idx]
            new = clique + [v]
            rest = [u for u in order[:idx] if u in nbr_sets[v]]
            if rest:
                expand(new, rest)
            elif len(new) > len(best):
                best = new

    expand([], list(range(adj.shape[0])))
    return best


class _BudgetHit(Exception):
    pass


def xi_epsilon(space, eps: float, *, allow_censored: bool = False,
               node_budget: int = DEFAULT_NODE_BUDGET) -> int:
    """Maximal size of an eps-separated set among points of positive mass.

    Accepts an ``UltrametricSpace``, a ``FiniteMmSpace`` or a
    ``DistanceMatrixSample`` (where every sampled point counts).  Ultrametric
    inputs are exact in near-linear time: points at distance <= eps form
    equivalence classes and one representative per class is separated.
    General spaces use branch and bound; if it exceeds ``node_budget``
    nodes, ``SearchBudgetExceeded`` carries certified bounds.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    _refuse_censored(space, allow_censored)
    if isinstance(space, UltrametricSpace):
        lab = space.labels_at(eps)
        return int(len(np.unique(lab[space.masses > 0])))
    d = _support_matrix(space)
    if d.shape[0] == 1:
        return 1
    if getattr(space, "ultrametric", False):
        return _ultrametric_classes(d, eps)
    lower = greedy_separated(d, eps)
    upper = greedy_cover(d, eps / 2.0)
    if len(lower) >= upper:
        return len(lower)
    try:
        return len(_max_clique(d > eps, lower, upper, node_budget))
    except _BudgetHit:
        raise SearchBudgetExceeded(len(lower), upper) from None


def covering_number(space, eps: float, max_points: int = 16) -> int:
    """Minimal number of closed eps-balls centred at support points covering the support.

    Exhaustive search; intended for small spaces.
    """
    d = _support_matrix(space)
    m = d.shape[0]
    if m > max_points:
        raise ValueError(f"exhaustive covering search limited to {max_points} points")
    within = d <= eps
    full = np.ones(m, dtype=bool)
    for k in range(1, m + 1):
        for centres in itertools.combinations(range(m), k):
            if np.array_equal(within[list(centres)].any(axis=0), full):
                return k
    return m


def block_count(tree: UltrametricSpace, t: float) -> int:
    """Number of blocks of the coalescent at time t, over all leaves."""
    return int(len(np.unique(tree.labels_at(t))))


# -- export ----------------------------------------------------------------------------

def matrix_to_csv(matrix: np.ndarray, indices=None) -> str:
    """Long format: one row ``i,j,r`` per unordered pair i < j of sample slots."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "point_i", "point_j", "r"])
    m = matrix.shape[0]
    idx = list(range(m)) if indices is None else list(indices)
    for i in range(m):
        for j in range(i + 1, m):
            w.writerow([i, j, idx[i], idx[j], repr(float(matrix[i, j]))])
    return buf.getvalue()


def functionals_table(space, eps_grid, delta_grid, *, allow_censored: bool = False) -> list[dict]:
    """Rows of (functional, parameter, value) for CSV/JSON export."""
    rows = []
    for eps in eps_grid:
        rows.append({"functional": "xi", "parameter": float(eps),
                     "value": xi_epsilon(space, eps, allow_censored=allow_censored)})
    for delta in delta_grid:
        rows.append({"functional": "v_delta", "parameter": float(delta),
                     "value": v_delta(space, delta, allow_censored=allow_censored)})
        rows.append({"functional": "v_tilde_delta", "parameter": float(delta),
                     "value": v_tilde_delta(space, delta, allow_censored=allow_censored)})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
