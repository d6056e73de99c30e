"""Finite measures on [0, 1] driving a Lambda-coalescent.

A measure is a finite sum of atoms and weighted densities drawn from a small
closed family (uniform on a subinterval, normalized Beta, normalized power
density).  Every density in the family has the form

    c * x**alpha * (1 - x)**beta    on [lo, hi] subset of [0, 1]

with alpha, beta > -1, which is what makes the merger rates available in
closed form and lets the quadrature treat endpoint singularities with an
algebraic weight.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy import integrate as _quad
from scipy import special

from .errors import (
    DivergentIntegralError,
    MeasureParseError,
    MeasureValidationError,
    QuadratureError,
)

DEFAULT_ATOL = 1e-12
DEFAULT_RTOL = 1e-12
DEFAULT_LIMIT = 10_000


def _log_beta_mass(a: float, b: float, lo: float, hi: float) -> float:
    """log of the incomplete Beta integral of x**(a-1) (1-x)**(b-1) over [lo, hi]."""
    if lo == 0.0 and hi == 1.0:
        return float(special.betaln(a, b))
    if lo == 0.0:
        frac = special.betainc(a, b, hi)
    elif hi == 1.0:
        frac = special.betaincc(a, b, lo)
    else:
        frac = special.betainc(a, b, hi) - special.betainc(a, b, lo)
    if frac <= 0.0:
        return -math.inf
    return float(special.betaln(a, b)) + math.log(frac)


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise MeasureValidationError(
                f"uniform support [{self.lo}, {self.hi}] must satisfy 0 <= lo < hi <= 1"
            )

    @property
    def alpha(self) -> float:
        return 0.0

    @property
    def beta(self) -> float:
        return 0.0

    @property
    def log_norm(self) -> float:
        return -math.log(self.hi - self.lo)

    def describe(self) -> str:
        return f"uniform:{self.lo!r},{self.hi!r}"


@dataclass(frozen=True)
class Beta:
    p: float
    q: float

    def __post_init__(self):
        if not (self.p > 0 and self.q > 0 and math.isfinite(self.p) and math.isfinite(self.q)):
            raise MeasureValidationError(f"beta shape parameters must be > 0, got ({self.p}, {self.q})")

    lo = 0.0
    hi = 1.0

    @property
    def alpha(self) -> float:
        return self.p - 1.0

    @property
    def beta(self) -> float:
        return self.q - 1.0

    @property
    def log_norm(self) -> float:
        return -float(special.betaln(self.p, self.q))

    def describe(self) -> str:
        return f"beta:{self.p!r},{self.q!r}"


@dataclass(frozen=True)
class Power:
    """Density (gamma + 1) * x**gamma on (0, 1]."""

    gamma: float

    def __post_init__(self):
        if not (self.gamma > -1 and math.isfinite(self.gamma)):
            raise MeasureValidationError(f"power exponent must be > -1, got {self.gamma}")

    lo = 0.0
    hi = 1.0

    @property
    def alpha(self) -> float:
        return self.gamma

    @property
    def beta(self) -> float:
        return 0.0

    @property
    def log_norm(self) -> float:
        return math.log(self.gamma + 1.0)

    def describe(self) -> str:
        return f"power:{self.gamma!r}"


Density = Union[Uniform, Beta, Power]


@dataclass(frozen=True)
class Atom:
    location: float
    mass: float


@dataclass(frozen=True)
class WeightedDensity:
    weight: float
    density: Density


@dataclass(frozen=True)
class LambdaMeasure:
    """Finite measure on [0, 1) made of atoms and weighted densities.

    Immutable and hashable, so it can key caches of rate tables.
    """

    atoms: tuple[Atom, ...] = ()
    densities: tuple[WeightedDensity, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "densities", tuple(self.densities))
        for a in self.atoms:
            if not (math.isfinite(a.location) and 0.0 <= a.location <= 1.0):
                raise MeasureValidationError(f"atom location {a.location} outside [0, 1]")
            if a.location == 1.0:
                raise MeasureValidationError("atoms at 1 are not supported")
            if not (a.mass > 0 and math.isfinite(a.mass)):
                raise MeasureValidationError(f"atom mass must be positive and finite, got {a.mass}")
        for d in self.densities:
            if not (d.weight > 0 and math.isfinite(d.weight)):
                raise MeasureValidationError(f"density weight must be positive and finite, got {d.weight}")
        if not self.atoms and not self.densities:
            raise MeasureValidationError("measure has zero total mass")

    # -- construction helpers -------------------------------------------------

    def __add__(self, other: "LambdaMeasure") -> "LambdaMeasure":
        if not isinstance(other, LambdaMeasure):
            return NotImplemented
        return LambdaMeasure(self.atoms + other.atoms, self.densities + other.densities)

    def scaled(self, c: float) -> "LambdaMeasure":
        if not c > 0:
            raise MeasureValidationError("scale factor must be positive")
        return LambdaMeasure(
            tuple(Atom(a.location, c * a.mass) for a in self.atoms),
            tuple(WeightedDensity(c * d.weight, d.density) for d in self.densities),
        )

    # -- simple functionals ---------------------------------------------------

    @property
    def total_mass(self) -> float:
        return math.fsum([a.mass for a in self.atoms] + [d.weight for d in self.densities])

    @property
    def mass_at_zero(self) -> float:
        return math.fsum(a.mass for a in self.atoms if a.location == 0.0)

    def mass_in(self, lo: float, hi: float) -> float:
        """Mass of the open interval (lo, hi), atoms at 0 excluded."""
        total = [a.mass for a in self.atoms if lo < a.location < hi]
        for wd in self.densities:
            d = wd.density
            u, v = max(lo, d.lo), min(hi, d.hi)
            if u >= v:
                continue
            a, b = d.alpha + 1.0, d.beta + 1.0
            full = _log_beta_mass(a, b, d.lo, d.hi)
            part = _log_beta_mass(a, b, u, v)
            total.append(wd.weight * math.exp(part - full) if part > -math.inf else 0.0)
        return math.fsum(total)

    def positive_support_min(self) -> float:
        """Infimum of the support restricted to (0, 1]."""
        locs = [a.location for a in self.atoms if a.location > 0]
        locs += [wd.density.lo for wd in self.densities]
        return min(locs) if locs else 1.0

    def describe(self) -> str:
        parts = [f"{a.mass!r}*atom:{a.location!r},1" for a in self.atoms]
        parts += [f"{d.weight!r}*{d.density.describe()}" for d in self.densities]
        return " + ".join(parts)


def total_mass(measure: LambdaMeasure) -> float:
    return measure.total_mass


# -- parsing ------------------------------------------------------------------

_TERM = re.compile(r"^(?:(?P<w>[^*]+)\*)?\s*(?P<name>[a-z][a-z\-]*)\s*(?::(?P<args>.*))?$")


def _num(text: str, spec: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MeasureParseError(f"bad number {text.strip()!r} in {spec!r}") from None
    if not math.isfinite(value):
        raise MeasureParseError(f"non-finite number {text.strip()!r} in {spec!r}")
    return value


def parse_measure(spec: str) -> LambdaMeasure:
    """Parse a textual measure specification.

    Grammar (whitespace insignificant, names case-insensitive)::

        measure   = term { "+" term } ;
        term      = [ number "*" ] component ;
        component = "kingman" | "bolthausen-sznitman"
                  | "uniform" [ ":" number "," number ]
                  | "beta" ":" number "," number
                  | "power" ":" number
                  | "atom" ":" number "," number ;

    ``atom:x,m`` is an atom of mass m at x; ``power:g`` is the density
    (g+1) x**g.  The leading weight multiplies the component's mass.

    >>> parse_measure("kingman").atoms
    (Atom(location=0.0, mass=1.0),)
    """
    if not isinstance(spec, str) or not spec.strip():
        raise MeasureParseError("empty measure specification")
    atoms: list[Atom] = []
    densities: list[WeightedDensity] = []
    for raw in spec.lower().split("+"):
        term = raw.strip()
        m = _TERM.match(term)
        if m is None:
            raise MeasureParseError(f"cannot parse term {term!r} in {spec!r}")
        weight = _num(m.group("w"), spec) if m.group("w") is not None else 1.0
        if weight <= 0:
            raise MeasureValidationError(f"term weight must be positive, got {weight}")
        name = m.group("name")
        args = [] if m.group("args") is None else [_num(t, spec) for t in m.group("args").split(",")]

        def want(count):
            if len(args) != count:
                raise MeasureParseError(f"{name!r} takes {count} argument(s), got {len(args)}")

        if name == "kingman":
            want(0)
            atoms.append(Atom(0.0, weight))
        elif name in ("bolthausen-sznitman", "bs"):
            want(0)
            densities.append(WeightedDensity(weight, Uniform(0.0, 1.0)))
        elif name == "uniform":
            if args:
                want(2)
                densities.append(WeightedDensity(weight, Uniform(args[0], args[1])))
            else:
                densities.append(WeightedDensity(weight, Uniform(0.0, 1.0)))
        elif name == "beta":
            want(2)
            densities.append(WeightedDensity(weight, Beta(args[0], args[1])))
        elif name == "power":
            want(1)
            densities.append(WeightedDensity(weight, Power(args[0])))
        elif name == "atom":
            want(2)
            atoms.append(Atom(args[0], weight * args[1]))
        else:
            raise MeasureParseError(f"unknown component {name!r} in {spec!r}")
    return LambdaMeasure(tuple(atoms), tuple(densities))


# -- integration --------------------------------------------------------------

def _run_quad(func, a, b, *, atol, rtol, limit, weight=None, wvar=None):
    kwargs = dict(epsabs=atol, epsrel=rtol, limit=limit, full_output=1)
    if weight is not None:
        kwargs.update(weight=weight, wvar=wvar)
    out = _quad.quad(func, a, b, **kwargs)
    value, abserr = out[0], out[1]
    if not math.isfinite(value):
        raise QuadratureError(f"quadrature produced {value} on [{a}, {b}]")
    # a fourth element means QUADPACK flagged a problem; roundoff-limited
    # results are kept while the error estimate stays far below the value
    if len(out) > 3 and abserr > max(1e3 * atol, 1e-8 * abs(value)):
        raise QuadratureError(f"quadrature did not converge on [{a}, {b}]: {out[3]}")
    return value, abserr


def _integrate_density(wd, f, order, breakpoints, atol, rtol, limit):
    d = wd.density
    alpha, beta = d.alpha, d.beta
    log_c = math.log(wd.weight) + d.log_norm
    c = math.exp(log_c)
    lo, hi = d.lo, d.hi
    if lo == 0.0 and alpha + order <= -1.0:
        raise DivergentIntegralError(
            f"integrand ~ x^{order} is not integrable against {d.describe()} near 0"
        )
    cuts = sorted({lo, hi, *(p for p in breakpoints if lo < p < hi)})

    def regular(x):
        # f(x) * x**-order; the algebraic-weight rule also samples x = 0
        if x == 0.0 and order < 0.0:
            x = 1e-150
        return f(x) * x ** (-order)

    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        left_sing = a == 0.0 and (alpha + order < 0.0 or order < 0.0)
        right_sing = b == 1.0 and beta < 0.0
        if left_sing and right_sing:
            val, _ = _run_quad(lambda x: c * regular(x), a, b,
                               weight="alg", wvar=(alpha + order, beta),
                               atol=atol, rtol=rtol, limit=limit)
        elif left_sing:
            val, _ = _run_quad(lambda x: c * regular(x) * (1.0 - x) ** beta, a, b,
                               weight="alg", wvar=(alpha + order, 0.0),
                               atol=atol, rtol=rtol, limit=limit)
        elif right_sing:
            val, _ = _run_quad(lambda x: c * f(x) * x ** alpha, a, b,
                               weight="alg", wvar=(0.0, beta),
                               atol=atol, rtol=rtol, limit=limit)
        else:
            val, _ = _run_quad(lambda x: c * f(x) * x ** alpha * (1.0 - x) ** beta, a, b,
                               atol=atol, rtol=rtol, limit=limit)
        total += val
    return total


def integrate(
    measure: LambdaMeasure,
    integrand: Callable[[float], float],
    singularity_order_at_0: float = 0.0,
    *,
    value_at_0: float | None = None,
    breakpoints: Sequence[float] = (),
    atol: float = DEFAULT_ATOL,
    rtol: float = DEFAULT_RTOL,
    limit: int = DEFAULT_LIMIT,
) -> float:
    """Integrate ``integrand`` against ``measure``.

    Atoms are evaluated exactly.  An atom at 0 uses ``value_at_0`` (or
    ``integrand(0.0)`` when not given) if ``singularity_order_at_0 >= 0``; a
    negative order against an atom at 0 is not integrable.  Densities use
    adaptive Gauss-Kronrod quadrature; near 0 the integrand is assumed to
    behave like ``x**singularity_order_at_0`` and the singular factor is moved
    into an algebraic quadrature weight, as is any (1-x)**beta singularity at 1.

    Raises DivergentIntegralError when the declared singularity is not
    integrable, QuadratureError when the tolerance is not reached within
    ``limit`` subintervals.
    """
    order = float(singularity_order_at_0)
    parts = []
    for a in measure.atoms:
        if a.location == 0.0:
            if order < 0:
                raise DivergentIntegralError("singular integrand against an atom at 0")
            v = integrand(0.0) if value_at_0 is None else value_at_0
            parts.append(a.mass * v)
        else:
            parts.append(a.mass * integrand(a.location))
    for wd in measure.densities:
        parts.append(_integrate_density(wd, integrand, order, breakpoints, atol, rtol, limit))
    return math.fsum(parts)


# -- merger rates -------------------------------------------------------------

def _lambda_bk_closed(measure: LambdaMeasure, b: int, k: int) -> float:
    parts = []
    for a in measure.atoms:
        if a.location == 0.0:
            parts.append(a.mass if k == 2 else 0.0)
        else:
            x = a.location
            parts.append(a.mass * x ** (k - 2) * (1.0 - x) ** (b - k))
    for wd in measure.densities:
        d = wd.density
        full = _log_beta_mass(d.alpha + 1.0, d.beta + 1.0, d.lo, d.hi)
        part = _log_beta_mass(d.alpha + k - 1.0, d.beta + b - k + 1.0, d.lo, d.hi)
        parts.append(wd.weight * math.exp(part - full) if part > -math.inf else 0.0)
    return math.fsum(parts)


def lambda_bk(measure: LambdaMeasure, b: int, k: int, method: str = "closed") -> float:
    """Rate at which a given k-subset of b blocks merges.

    ``method="closed"`` uses Beta-function identities, ``"quad"`` integrates
    x**(k-2) (1-x)**(b-k) numerically (kept as an independent check).
    """
    if not (2 <= k <= b):
        raise ValueError(f"need 2 <= k <= b, got b={b}, k={k}")
    if method == "closed":
        return _lambda_bk_closed(measure, b, k)
    if method == "quad":
        return integrate(
            measure,
            lambda x: x ** (k - 2) * (1.0 - x) ** (b - k),
            0.0,
            value_at_0=1.0 if k == 2 else 0.0,
        )
    raise ValueError(f"unknown method {method!r}")


class LogRateRows:
    """Vectorised log(lambda_{b,k}) rows, k = 2..b, for b up to ``b_max``.

    Beta-function values come from precomputed log-Gamma tables so a full
    row costs O(b) array arithmetic.
    """

    def __init__(self, measure: LambdaMeasure, b_max: int):
        self.measure = measure
        self.b_max = b_max
        j = np.arange(b_max + 1, dtype=float)
        self._dens = []
        for wd in measure.densities:
            d = wd.density
            a1, b1 = d.alpha + 1.0, d.beta + 1.0
            log_norm = math.log(wd.weight) - _log_beta_mass(a1, b1, d.lo, d.hi)
            if d.lo == 0.0 and d.hi == 1.0:
                tables = (
                    special.gammaln(a1 + j),
                    special.gammaln(b1 + j),
                    special.gammaln(a1 + b1 + j),
                )
                self._dens.append(("full", log_norm, tables, d))
            else:
                self._dens.append(("partial", log_norm, None, d))

    def row(self, b: int) -> np.ndarray:
        k = np.arange(2, b + 1)
        terms = []
        for a in self.measure.atoms:
            if a.location == 0.0:
                r = np.full(k.shape, -np.inf)
                r[0] = math.log(a.mass)
            else:
                x = a.location
                r = math.log(a.mass) + (k - 2) * math.log(x) + (b - k) * math.log1p(-x)
            terms.append(r)
        for kind, log_norm, tables, d in self._dens:
            if kind == "full":
                ga, gb, gab = tables
                r = log_norm + ga[k - 2] + gb[b - k] - gab[b - 2]
            else:
                p = d.alpha + k - 1.0
                q = d.beta + b - k + 1.0
                if d.lo == 0.0:
                    frac = special.betainc(p, q, d.hi)
                elif d.hi == 1.0:
                    frac = special.betaincc(p, q, d.lo)
                else:
                    frac = special.betainc(p, q, d.hi) - special.betainc(p, q, d.lo)
                with np.errstate(divide="ignore"):
                    r = log_norm + special.betaln(p, q) + np.log(np.maximum(frac, 0.0))
            terms.append(r)
        if len(terms) == 1:
            return np.asarray(terms[0], dtype=float)
        return np.logaddexp.reduce(np.vstack(terms), axis=0)
