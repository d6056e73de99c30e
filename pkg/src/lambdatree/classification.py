"""Analytic classification of a Lambda-coalescent.

Three tests are run from finite numerical evidence:

* the merger-rate series  sum_b 1 / d_b,  d_b = sum_k k C(b,k) lambda_{b,k};
* the integral  int_1^inf dq / psi(q)  with psi the coalescent's Laplace-type
  exponent;
* the integral  int x^-1 Lambda(dx)  separating dust-free coalescents from
  those with dust.

Convergence of an infinite series or integral cannot be decided from finitely
many terms, so the first two tests return a three-valued verdict based on a
fitted tail model (see :func:`tail_verdict`).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import special
from scipy.integrate import cumulative_simpson

from .errors import DivergentIntegralError, NumericalError
from .measure import LambdaMeasure, LogRateRows, integrate


class Verdict(str, enum.Enum):
    CONVERGES = "converges"
    DIVERGES = "diverges"
    INCONCLUSIVE = "inconclusive"


class CoalescentClass(str, enum.Enum):
    COMES_DOWN = "ComesDownFromInfinity"
    DUST_FREE_INFINITE = "DustFreeStaysInfinite"
    HAS_DUST = "HasDust"
    INCONSISTENT = "Inconsistent"
    INCONCLUSIVE = "Inconclusive"


# -- rate table ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RateTable:
    """Merger rates lambda_{b,k} with per-b aggregates.

    ``gamma[b]`` is the total merger rate with b blocks and ``d[b]`` the
    expected number of blocks involved per unit time; both are indexed by b
    (entries 0 and 1 are NaN).  Individual rows are kept only for
    ``b <= rows_kept`` to bound memory; ``size_cdf(b)`` gives the cumulative
    distribution of the merger size k = 2..b for those rows.
    """

    measure: LambdaMeasure
    b_max: int
    gamma: np.ndarray
    d: np.ndarray
    rows_kept: int
    _rows: tuple = field(repr=False)
    _cdfs: tuple = field(repr=False)

    def row(self, b: int) -> np.ndarray:
        """lambda_{b,k} for k = 2..b."""
        if not 2 <= b <= self.rows_kept:
            raise IndexError(f"row {b} not stored (rows kept up to {self.rows_kept})")
        return self._rows[b - 2]

    def rate(self, b: int, k: int) -> float:
        return float(self.row(b)[k - 2])

    def size_cdf(self, b: int) -> np.ndarray:
        if not 2 <= b <= self.rows_kept:
            raise IndexError(f"row {b} not stored (rows kept up to {self.rows_kept})")
        return self._cdfs[b - 2]


def build_rate_table(measure: LambdaMeasure, b_max: int, rows_kept: int | None = None) -> RateTable:
    """Fill lambda_{b,k} for 2 <= k <= b <= b_max.

    Aggregates are summed in log space (binomial coefficients reach 2**b), so
    large tables never overflow to infinity.
    """
    if b_max < 2:
        raise ValueError("b_max must be at least 2")
    if rows_kept is None:
        rows_kept = min(b_max, 1000)
    rows_kept = min(rows_kept, b_max)
    rows_src = LogRateRows(measure, b_max)
    lg = special.gammaln(np.arange(b_max + 1) + 1.0)
    gamma = np.full(b_max + 1, np.nan)
    d = np.full(b_max + 1, np.nan)
    rows, cdfs = [], []
    for b in range(2, b_max + 1):
        k = np.arange(2, b + 1)
        log_lam = rows_src.row(b)
        log_terms = lg[b] - lg[k] - lg[b - k] + log_lam
        log_gamma = special.logsumexp(log_terms)
        gamma[b] = math.exp(log_gamma)
        d[b] = math.exp(special.logsumexp(log_terms + np.log(k)))
        if b <= rows_kept:
            rows.append(np.exp(log_lam))
            cdf = np.cumsum(np.exp(log_terms - log_gamma))
            cdf[-1] = 1.0
            cdfs.append(cdf)
    if not np.all(np.isfinite(gamma[2:])) or not np.all(np.isfinite(d[2:])):
        raise NumericalError("non-finite merger rate aggregate")
    return RateTable(measure, b_max, gamma, d, rows_kept, tuple(rows), tuple(cdfs))


@lru_cache(maxsize=16)
def cached_rate_table(measure: LambdaMeasure, b_max: int) -> RateTable:
    return build_rate_table(measure, b_max, rows_kept=b_max)


# -- convergence verdicts -----------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    """Least-squares fit of log increments of a cumulative quantity.

    ``slope`` and ``loglog`` are the coefficients of log(x) and log(log(x)) in
    the joint fit; ``loglog_only`` is the log(log(x)) coefficient when the
    slope is pinned to 0.  ``residual`` is the RMS residual of the joint fit.
    """

    slope: float
    loglog: float
    loglog_only: float
    residual: float
    window: tuple[float, float]


@dataclass(frozen=True)
class ConvergenceVerdict:
    verdict: Verdict
    cutoffs: tuple[float, ...]
    cumulative: tuple[float, ...]
    fit: TailFit | None
    note: str = ""
    value: float | None = None
    method: str = "tail-fit"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["verdict"] = self.verdict.value
        return out


@dataclass(frozen=True)
class VerdictRule:
    """Thresholds of the tail-fit decision rule."""

    fit_decades: float = 2.0
    slope_margin: float = 0.1
    loglog_margin: float = 0.25
    residual_threshold: float = 0.05


DEFAULT_RULE = VerdictRule()


def fit_tail(cutoffs: Sequence[float], cumulative: Sequence[float], fit_decades: float) -> TailFit | None:
    x = np.asarray(cutoffs, dtype=float)
    c = np.asarray(cumulative, dtype=float)
    # increments per unit log-cutoff, so an uneven integer grid adds no noise
    inc = np.diff(c) / np.diff(np.log(x))
    xs = x[1:]
    sel = xs >= xs[-1] / 10.0 ** fit_decades
    xs, inc = xs[sel], inc[sel]
    if len(xs) < 4 or np.any(inc <= 0) or xs[0] <= 1.0:
        return None
    y = np.log(inc)
    lx, llx = np.log(xs), np.log(np.log(xs))
    design = np.column_stack([np.ones_like(lx), lx, llx])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = float(np.sqrt(np.mean((y - design @ coef) ** 2)))
    coef2, *_ = np.linalg.lstsq(design[:, [0, 2]], y, rcond=None)
    return TailFit(float(coef[1]), float(coef[2]), float(coef2[1]), resid, (float(xs[0]), float(xs[-1])))


def tail_verdict(cutoffs, cumulative, rule: VerdictRule = DEFAULT_RULE) -> ConvergenceVerdict:
    """Decide whether a non-decreasing cumulative quantity has a finite limit.

    The increments between successive cutoffs (on a geometric grid) over the
    last ``rule.fit_decades`` decades are fitted by

        log(increment) = a + s log(x) + c log(log(x)).

    Increments of a term sequence b**-p (log b)**-r on a geometric grid behave
    like x**(1-p) (log x)**-r, so the limit is finite iff s < 0, or s = 0 and
    the log-log coefficient is below -1.  With margins:

    * residual above threshold          -> inconclusive
    * s < -slope_margin                 -> converges
    * s > +slope_margin                 -> diverges
    * otherwise refit with s = 0 giving c:
      c >= -1 - loglog_margin           -> diverges (the x / log x boundary
                                           class is divergent)
      c < -1 - 2 * loglog_margin        -> converges
      else                              -> inconclusive
    """
    cutoffs = tuple(float(v) for v in cutoffs)
    cumulative = tuple(float(v) for v in cumulative)
    inc = np.diff(cumulative)
    tail = np.asarray(cutoffs[1:]) >= cutoffs[-1] / 10.0 ** rule.fit_decades
    if np.all(inc[tail] == 0.0):
        return ConvergenceVerdict(Verdict.CONVERGES, cutoffs, cumulative, None,
                                  "tail increments vanish identically", cumulative[-1])
    fit = fit_tail(cutoffs, cumulative, rule.fit_decades)
    if fit is None:
        return ConvergenceVerdict(Verdict.INCONCLUSIVE, cutoffs, cumulative, None,
                                  "increments not strictly positive; no fit")
    if fit.residual > rule.residual_threshold:
        return ConvergenceVerdict(Verdict.INCONCLUSIVE, cutoffs, cumulative, fit,
                                  f"fit residual {fit.residual:.3g} above threshold")
    if fit.slope < -rule.slope_margin:
        verdict, note = Verdict.CONVERGES, "increments decay like a power"
    elif fit.slope > rule.slope_margin:
        verdict, note = Verdict.DIVERGES, "increments grow like a power"
    elif fit.loglog_only >= -1.0 - rule.loglog_margin:
        verdict, note = Verdict.DIVERGES, "increments decay at most like 1/log"
    elif fit.loglog_only < -1.0 - 2.0 * rule.loglog_margin:
        verdict, note = Verdict.CONVERGES, "increments decay faster than 1/log"
    else:
        verdict, note = Verdict.INCONCLUSIVE, "increments near the 1/log boundary"
    value = cumulative[-1] if verdict is Verdict.CONVERGES else None
    return ConvergenceVerdict(verdict, cutoffs, cumulative, fit, note, value)


def _geometric_ints(lo: int, hi: int, per_decade: int) -> np.ndarray:
    count = int(round(per_decade * math.log10(hi / lo))) + 1
    return np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))


def cdi_series_test(table: RateTable, rule: VerdictRule = DEFAULT_RULE, *,
                    min_b_max: int = 100, per_decade: int = 10) -> ConvergenceVerdict:
    """Test convergence of sum_{b>=2} 1/d_b from a rate table."""
    if table.b_max < min_b_max:
        raise ValueError(f"series test needs b_max >= {min_b_max}, got {table.b_max}")
    d = table.d[2:]
    if np.any(d <= 0):
        raise NumericalError("d_b vanishes: zero measure")
    partial = np.cumsum(1.0 / d)  # partial[j] = sum_{b=2}^{j+2}
    cutoffs = _geometric_ints(2, table.b_max, per_decade)
    return tail_verdict(cutoffs, partial[cutoffs - 2], rule)


def _psi_kernel(q: float, x: float) -> float:
    y = q * x
    if y < 1e-4:
        return q * q * (0.5 - y / 6.0 + y * y / 24.0)
    return (math.expm1(-y) + y) / (x * x)


def psi(measure: LambdaMeasure, q: float) -> float:
    """int_0^1 (exp(-q x) - 1 + q x) x**-2 Lambda(dx); an atom at 0 gives q**2/2."""
    if q < 0:
        raise ValueError("psi is defined for q >= 0")
    if q == 0:
        return 0.0
    marks = [c / q for c in (1.0, 10.0, 100.0, 1000.0) if c / q < 1.0]
    return integrate(measure, lambda x: _psi_kernel(q, x), 0.0,
                     value_at_0=0.5 * q * q, breakpoints=marks)


def cdi_psi_test(measure: LambdaMeasure, rule: VerdictRule = DEFAULT_RULE, *,
                 t: float = 1.0, q_max: float = 1e8, per_decade: int = 20) -> ConvergenceVerdict:
    """Test convergence of int_t^inf dq / psi(q) on a geometric grid of upper limits."""
    count = int(round(per_decade * math.log10(q_max / t))) + 1
    qs = np.geomspace(t, q_max, count)
    values = np.array([psi(measure, q) for q in qs])
    if np.any(values <= 0):
        raise NumericalError("psi vanishes: zero measure")
    # dq / psi = (q / psi) d(log q); Simpson in log q
    cum = cumulative_simpson(qs / values, x=np.log(qs), initial=0.0)
    return tail_verdict(qs, cum, rule)


def dust_test(measure: LambdaMeasure, rule: VerdictRule = DEFAULT_RULE, *,
              per_decade: int = 10, x_floor: float = 1e-8) -> ConvergenceVerdict:
    """Decide whether int x^-1 Lambda(dx) is infinite (dust-free) or finite (dust).

    Every density in the measure family behaves like x**alpha near 0, so the
    verdict is exact: the integral diverges iff there is an atom at 0 or a
    density reaching 0 with alpha <= 0.  Truncated integrals over [1/Q, 1]
    are attached as evidence together with the tail fit.
    """
    if measure.mass_at_zero > 0:
        return ConvergenceVerdict(Verdict.DIVERGES, (), (), None,
                                  "atom at 0: integral infinite", method="exact")
    count = int(round(per_decade * math.log10(1.0 / x_floor))) + 1
    qs = np.geomspace(1.0, 1.0 / x_floor, count)
    cum = [0.0]
    for Q in qs[1:]:
        cut = 1.0 / Q
        cum.append(integrate(measure, lambda x, cut=cut: 1.0 / x if x >= cut else 0.0, 0.0,
                             value_at_0=0.0, breakpoints=np.geomspace(cut, 1.0, 9)[:-1]))
    evidence = tail_verdict(qs, cum, rule)
    try:
        value = integrate(measure, lambda x: 1.0 / x, -1.0)
    except DivergentIntegralError:
        verdict, value, note = Verdict.DIVERGES, None, "density non-integrable against 1/x at 0"
    else:
        verdict, note = Verdict.CONVERGES, "integral finite"
    if evidence.verdict not in (verdict, Verdict.INCONCLUSIVE):
        note += f"; tail fit alone suggested {evidence.verdict.value}"
    return ConvergenceVerdict(verdict, evidence.cutoffs, evidence.cumulative, evidence.fit,
                              note, value, method="exact")


# -- combined classification --------------------------------------------------

@dataclass(frozen=True)
class ClassifyConfig:
    b_max: int = 10_000
    q_max: float = 1e8
    rule: VerdictRule = DEFAULT_RULE


@dataclass(frozen=True)
class ClassificationReport:
    measure: str
    cdi_series: ConvergenceVerdict
    cdi_psi: ConvergenceVerdict
    dust_free: ConvergenceVerdict
    combined: CoalescentClass
    notes: tuple[str, ...] = ()

    @property
    def comes_down(self) -> bool:
        return self.combined is CoalescentClass.COMES_DOWN

    def to_dict(self) -> dict:
        return {
            "measure": self.measure,
            "combined": self.combined.value,
            "cdi_series": self.cdi_series.to_dict(),
            "cdi_psi": self.cdi_psi.to_dict(),
            "dust_free": self.dust_free.to_dict(),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"measure: {self.measure}", f"class: {self.combined.value}"]
        for name in ("cdi_series", "cdi_psi", "dust_free"):
            v = getattr(self, name)
            lines.append(f"{name}.verdict: {v.verdict.value}")
            lines.append(f"{name}.method: {v.method}")
            if v.note:
                lines.append(f"{name}.note: {v.note}")
            if v.value is not None:
                lines.append(f"{name}.value: {v.value!r}")
            if v.fit is not None:
                lines.append(f"{name}.fit.slope: {v.fit.slope!r}")
                lines.append(f"{name}.fit.loglog: {v.fit.loglog!r}")
                lines.append(f"{name}.fit.loglog_only: {v.fit.loglog_only!r}")
                lines.append(f"{name}.fit.residual: {v.fit.residual!r}")
            lines.append(f"{name}.cutoffs: [{', '.join(repr(c) for c in v.cutoffs)}]")
            lines.append(f"{name}.cumulative: [{', '.join(repr(c) for c in v.cumulative)}]")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def combine_verdicts(series: Verdict, psi_v: Verdict, dust: Verdict) -> tuple[CoalescentClass, list[str]]:
    notes = []
    decisive = {v for v in (series, psi_v) if v is not Verdict.INCONCLUSIVE}
    if len(decisive) == 2:
        notes.append("series and psi criteria disagree")
        return CoalescentClass.INCONSISTENT, notes
    if not decisive:
        if dust is Verdict.CONVERGES:
            notes.append("both coming-down criteria inconclusive; dust excludes coming down")
            return CoalescentClass.HAS_DUST, notes
        notes.append("both coming-down criteria inconclusive")
        return CoalescentClass.INCONCLUSIVE, notes
    if Verdict.INCONCLUSIVE in (series, psi_v):
        notes.append("one coming-down criterion inconclusive")
    (cdi,) = decisive
    if cdi is Verdict.CONVERGES:
        if dust is Verdict.CONVERGES:
            notes.append("coming down from infinity but dust integral finite")
            return CoalescentClass.INCONSISTENT, notes
        if dust is Verdict.INCONCLUSIVE:
            notes.append("coming down from infinity but dust-free verdict missing")
            return CoalescentClass.INCONCLUSIVE, notes
        return CoalescentClass.COMES_DOWN, notes
    if dust is Verdict.DIVERGES:
        return CoalescentClass.DUST_FREE_INFINITE, notes
    if dust is Verdict.CONVERGES:
        return CoalescentClass.HAS_DUST, notes
    return CoalescentClass.INCONCLUSIVE, notes


def classify(measure: LambdaMeasure, config: ClassifyConfig = ClassifyConfig(),
             label: str | None = None) -> ClassificationReport:
    table = build_rate_table(measure, config.b_max, rows_kept=2)
    series = cdi_series_test(table, config.rule)
    psi_v = cdi_psi_test(measure, config.rule, q_max=config.q_max)
    dust = dust_test(measure, config.rule)
    combined, notes = combine_verdicts(series.verdict, psi_v.verdict, dust.verdict)
    return ClassificationReport(label or measure.describe(), series, psi_v, dust, combined, tuple(notes))
