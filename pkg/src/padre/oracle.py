"""Brute-force extraction of the exact multivariate polynomial of a map.

Any black-box map f: R^{N x D} -> R^{N x D} that is entrywise polynomial of
total degree <= d can be identified exactly on tiny instances: enumerate all
monomials up to the bound, evaluate f on a deterministic low-discrepancy
probe set, and solve the resulting linear system.  The recovered coefficient
table doubles as an independent evaluator, a degree certificate, and a
detector for maps (like softmax attention) that are not polynomial at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .tensor import SizeCapError

MAX_VARS = 8
MAX_DEGREE = 4
PRUNE_TOL = 1e-9
RESIDUAL_TOL = 1e-6
COND_CAP = 1e10

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class NotPolynomialError(ValueError):
    """The probe residual is too large for any polynomial of this degree."""

    def __init__(self, residual: float, degree: int):
        self.residual = residual
        super().__init__(
            f"fit residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}: "
            f"not a polynomial of degree <= {degree}"
        )


class IllConditionedError(ValueError):
    """The probe system's condition number exceeds the safety cap."""


class DegreeCapError(ValueError):
    """The map has effective degree beyond the requested cap."""


@dataclass(frozen=True)
class MultiIndex:
    """Exponent assignment over the N*D input entries; zero exponents dropped."""

    powers: tuple[tuple[tuple[int, int], int], ...]

    @classmethod
    def from_exponents(cls, evec: np.ndarray, n_channels: int) -> "MultiIndex":
        powers = tuple(
            ((j // n_channels, j % n_channels), int(e))
            for j, e in enumerate(evec) if e
        )
        return cls(powers)

    @property
    def total(self) -> int:
        return sum(e for _, e in self.powers)

    def __str__(self) -> str:
        if not self.powers:
            return "1"
        return " ".join(f"({m},{n})^{e}" for (m, n), e in self.powers)


class FitDiagnostics(NamedTuple):
    residual: float
    condition: float
    n_monomials: int
    n_probes: int


@dataclass
class PolyCoeffs:
    """Per output entry, a sparse map from multi-indices to coefficients."""

    n_tokens: int
    n_channels: int
    degree_bound: int
    terms: dict[tuple[int, int], dict[MultiIndex, float]]
    diagnostics: FitDiagnostics

    def support_degrees(self) -> set[int]:
        return {k.total for entry in self.terms.values() for k in entry}

    def max_degree(self) -> int:
        degs = self.support_degrees()
        return max(degs) if degs else 0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_tokens, self.n_channels))
        flat = x.ravel()
        for (m, n), entry in self.terms.items():
            acc = 0.0
            for k, coeff in entry.items():
                mono = 1.0
                for (mm, nn), e in k.powers:
                    mono *= flat[mm * self.n_channels + nn] ** e
                acc += coeff * mono
            out[m, n] = acc
        return out

    def dump_lines(self) -> list[str]:
        """Text form: "(m,n) | k=... | pi", sorted by |k| then lexicographic."""
        lines = []
        for (m, n) in sorted(self.terms):
            entry = self.terms[(m, n)]
            for k in sorted(entry, key=lambda k: (k.total, k.powers)):
                lines.append(f"({m},{n}) | k={k} | {entry[k]!r}")
        return lines


def monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    """All exponent vectors with total degree <= ``degree``, graded order."""
    rows: list[list[int]] = []

    def rec(prefix: list[int], remaining: int, budget: int) -> None:
        if remaining == 0:
            rows.append(list(prefix))
            return
        for e in range(budget + 1):
            prefix.append(e)
            rec(prefix, remaining - 1, budget - e)
            prefix.pop()

    rec([], n_vars, degree)
    rows.sort(key=lambda r: (sum(r), r))
    return np.array(rows, dtype=np.int64)


def halton(n_points: int, n_dims: int, skip: int = 20) -> np.ndarray:
    """Deterministic low-discrepancy points in (0, 1)^n_dims."""
    if n_dims > len(_PRIMES):
        raise SizeCapError(f"halton supports up to {len(_PRIMES)} dims")
    out = np.empty((n_points, n_dims))
    for d in range(n_dims):
        base = _PRIMES[d]
        for i in range(n_points):
            idx, f, v = skip + i + 1, 1.0, 0.0
            while idx > 0:
                f /= base
                v += f * (idx % base)
                idx //= base
            out[i, d] = v
    return out


def probe_points(n_points: int, n_dims: int) -> np.ndarray:
    """Probe set in (-1, 1)^n_dims with an arcsine (Chebyshev-like) profile.

    The cos map clusters points toward the boundary, which keeps the monomial
    Vandermonde system well conditioned at the degrees used here.
    """
    return np.cos(np.pi * halton(n_points, n_dims))


def extract_coeffs(f: Callable[[np.ndarray], np.ndarray], n_tokens: int,
                   n_channels: int, degree_bound: int, *, oversample: float = 2.0,
                   prune_tol: float = PRUNE_TOL, residual_tol: float = RESIDUAL_TOL,
                   cond_cap: float = COND_CAP) -> PolyCoeffs:
    """Identify the polynomial coefficients of ``f`` by least squares.

    Raises NotPolynomialError when the fit residual shows the map cannot be
    a polynomial of the given degree, and IllConditionedError when the probe
    system is numerically untrustworthy.
    """
    n_vars = n_tokens * n_channels
    if n_vars > MAX_VARS:
        raise SizeCapError(f"coefficient extraction capped at N*D <= {MAX_VARS}")
    if degree_bound > MAX_DEGREE:
        raise SizeCapError(f"coefficient extraction capped at degree <= {MAX_DEGREE}")
    exps = monomial_exponents(n_vars, degree_bound)
    n_mono = exps.shape[0]
    n_probes = int(math.ceil(oversample * n_mono))
    pts = probe_points(n_probes, n_vars)
    vand = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)
    cond = np.linalg.cond(vand)
    if cond > cond_cap:
        raise IllConditionedError(f"probe system condition {cond:.3e} > {cond_cap:.0e}")
    values = np.empty((n_probes, n_vars))
    for i in range(n_probes):
        values[i] = f(pts[i].reshape(n_tokens, n_channels)).ravel()
    coeffs, *_ = np.linalg.lstsq(vand, values, rcond=None)
    residual = float(np.max(np.abs(vand @ coeffs - values))) if n_probes else 0.0
    if residual > residual_tol:
        raise NotPolynomialError(residual, degree_bound)
    terms: dict[tuple[int, int], dict[MultiIndex, float]] = {}
    for out_idx in range(n_vars):
        entry: dict[MultiIndex, float] = {}
        for mono_idx in range(n_mono):
            c = coeffs[mono_idx, out_idx]
            if abs(c) > prune_tol:
                entry[MultiIndex.from_exponents(exps[mono_idx], n_channels)] = float(c)
        if entry:
            terms[(out_idx // n_channels, out_idx % n_channels)] = entry
    return PolyCoeffs(
        n_tokens=n_tokens, n_channels=n_channels, degree_bound=degree_bound,
        terms=terms,
        diagnostics=FitDiagnostics(residual, float(cond), n_mono, n_probes),
    )


class HomogeneityVerdict(NamedTuple):
    passed: bool
    max_rel_err: float


def assert_homogeneous(f: Callable[[np.ndarray], np.ndarray], degree: int,
                       trials: int, shape: tuple[int, int], seed: int = 0,
                       tol: float = 1e-10) -> HomogeneityVerdict:
    """Check f(a*x) == a^degree * f(x) over random trials with a in [0.5, 2]."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=shape)
        alpha = rng.uniform(0.5, 2.0)
        lhs = f(alpha * x)
        rhs = alpha ** degree * f(x)
        scale = max(float(np.max(np.abs(rhs))), 1e-12)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale)
    return HomogeneityVerdict(worst <= tol, worst)


def max_effective_degree(f: Callable[[np.ndarray], np.ndarray], cap: int,
                         shape: tuple[int, int], directions: int = 16,
                         seed: int = 0, coeff_tol: float = 1e-8) -> int:
    """Largest polynomial degree present, by univariate restriction.

    Fits g(t) = f(t * x0) per random direction x0; raises DegreeCapError when
    the restriction cannot be matched by a degree-``cap`` polynomial.
    """
    rng = np.random.default_rng(seed)
    # Chebyshev points on [0.5, 1.5]: away from 0 so low-degree terms stay visible
    n_t = cap + 5
    t = 1.0 + 0.5 * np.cos(np.pi * (2 * np.arange(n_t) + 1) / (2 * n_t))
    vand = t[:, None] ** np.arange(cap + 1)[None, :]
    best = 0
    for _ in range(directions):
        x0 = rng.uniform(-1.0, 1.0, size=shape)
        samples = np.stack([f(ti * x0).ravel() for ti in t])
        coeffs, *_ = np.linalg.lstsq(vand, samples, rcond=None)
        resid = float(np.max(np.abs(vand @ coeffs - samples)))
        if resid > 1e-7 * max(1.0, float(np.max(np.abs(samples)))):
            raise DegreeCapError(
                f"restriction residual {resid:.3e}: effective degree exceeds cap {cap}"
            )
        present = np.nonzero(np.max(np.abs(coeffs), axis=1) > coeff_tol)[0]
        if present.size:
            best = max(best, int(present[-1]))
    return best
