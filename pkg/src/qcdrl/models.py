"""Probability models for change detection: densities, score functions,
log moment generating functions, tail rates, and the large-kappa
threshold/cost approximations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy import integrate, optimize
from scipy.special import ndtr

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(Exception):
    """Numeric failure in the model layer (divergent integral, no root)."""


@dataclass(frozen=True)
class DensitySpec:
    """One of the supported location-scale families.

    ``scale`` is the standard deviation for gaussian, the diversity b for
    laplace, and the half-width gamma for cauchy.
    """

    family: str
    location: float
    scale: float

    _FAMILIES = ("gaussian", "laplace", "cauchy")

    def __post_init__(self):
        if self.family not in self._FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {self._FAMILIES}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def logpdf(self, y):
        z = (np.asarray(y, dtype=float) - self.location) / self.scale
        if self.family == "gaussian":
            out = -0.5 * z * z - math.log(self.scale) - 0.5 * LOG_2PI
        elif self.family == "laplace":
            out = -np.abs(z) - math.log(2.0 * self.scale)
        else:
            out = -np.log1p(z * z) - math.log(math.pi * self.scale)
        return out if np.ndim(y) else float(out)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        z = (np.asarray(y, dtype=float) - self.location) / self.scale
        if self.family == "gaussian":
            out = ndtr(z)
        elif self.family == "laplace":
            out = np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))
        else:
            out = 0.5 + np.arctan(z) / math.pi
        return out if np.ndim(y) else float(out)

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "gaussian":
            return rng.normal(self.location, self.scale, size=size)
        if self.family == "laplace":
            return rng.laplace(self.location, self.scale, size=size)
        return self.location + self.scale * rng.standard_cauchy(size=size)


@dataclass(frozen=True)
class Geometric:
    """Change-time law P{tau = k} = rho (1-rho)^k on k = 0, 1, 2, ..."""

    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0,1), got {self.rho}")


@dataclass(frozen=True)
class GeometricMixture:
    """Slow component with probability p, fast component otherwise."""

    p: float
    rho_slow: float
    rho_fast: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0,1], got {self.p}")
        for name in ("rho_slow", "rho_fast"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0,1), got {v}")


ChangeTimeLaw = Union[Geometric, GeometricMixture]


@dataclass(frozen=True)
class TailRate:
    rho_a: float

    def __post_init__(self):
        if not self.rho_a > 0:
            raise ValueError(f"tail rate must be positive, got {self.rho_a}")


@dataclass(frozen=True)
class ScoreFunction:
    """Detector score F = log(f1_det / f0_det), possibly mismatched with the
    true observation densities.

    ``m0`` and ``m1`` are the drift means of F under the *true* pre- and
    post-change densities; positive recurrence of the reflected walk needs
    m0 < 0 < m1, enforced at construction.
    """

    f0_det: DensitySpec
    f1_det: DensitySpec
    m0: float
    m1: float

    def __post_init__(self):
        if not (self.m0 < 0.0 < self.m1):
            raise ValueError(f"score drift means must satisfy m0 < 0 < m1, got ({self.m0}, {self.m1})")

    @classmethod
    def build(cls, f0_det: DensitySpec, f1_det: DensitySpec,
              truth: tuple[DensitySpec, DensitySpec]) -> "ScoreFunction":
        m0, m1 = drift_means_raw(f0_det, f1_det, truth)
        return cls(f0_det, f1_det, m0, m1)

    def __call__(self, y):
        return llr_eval(self, y)

    @property
    def is_ideal_gaussian(self) -> bool:
        return (self.f0_det.family == "gaussian" and self.f1_det.family == "gaussian"
                and self.f0_det.scale == self.f1_det.scale)


def llr_eval(score: ScoreFunction, y):
    """Log density ratio of the detector pair, computed in log space."""
    return score.f1_det.logpdf(y) - score.f0_det.logpdf(y)


def _integration_breakpoints(score: ScoreFunction) -> list[float]:
    # Laplace log-pdfs have kinks at their locations; split quadrature there.
    pts = []
    for d in (score.f0_det, score.f1_det):
        if d.family == "laplace":
            pts.append(d.location)
    return sorted(set(pts))


def _quad_full_line(f: Callable[[float], float], breakpoints: Sequence[float],
                    name: str, tol: float = 1e-8) -> float:
    """Adaptive quadrature over the whole real line, split at breakpoints."""
    pts = [-np.inf] + sorted(breakpoints) + [np.inf]
    total = 0.0
    err = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        v, e = integrate.quad(f, a, b, epsabs=tol * 1e-2, epsrel=1e-10, limit=300)
        total += v
        err += e
    if not math.isfinite(total) or err > tol:
        raise ModelError(f"quadrature for {name} did not converge (value={total}, err={err})")
    return total


def drift_means_raw(f0_det: DensitySpec, f1_det: DensitySpec,
                    truth: tuple[DensitySpec, DensitySpec]) -> tuple[float, float]:
    """Drift means of F = log(f1_det/f0_det) under the true density pair."""
    f0, f1 = truth

    def F(y):
        return f1_det.logpdf(y) - f0_det.logpdf(y)

    pts = []
    for d in (f0_det, f1_det):
        if d.family == "laplace":
            pts.append(d.location)
    m0 = _quad_full_line(lambda y: F(y) * f0.pdf(y), pts, "m0 = int F f0")
    m1 = _quad_full_line(lambda y: F(y) * f1.pdf(y), pts, "m1 = int F f1")
    return m0, m1


def drift_means(score: ScoreFunction, truth: tuple[DensitySpec, DensitySpec]) -> tuple[float, float]:
    return drift_means_raw(score.f0_det, score.f1_det, truth)


def log_mgf(score: ScoreFunction, f_i: DensitySpec, upsilon: float) -> float:
    """Log moment generating function of F(Y) with Y ~ f_i.

    The ideal gaussian case (f_i equal to one of the detector densities and
    both gaussian with common scale) uses the closed form m v (v -+ 1);
    everything else goes through quadrature.
    """
    if score.is_ideal_gaussian and f_i in (score.f0_det, score.f1_det):
        delta = score.f1_det.location - score.f0_det.location
        m = delta * delta / (2.0 * score.f0_det.scale ** 2)
        if f_i == score.f0_det:
            return m * upsilon * (upsilon - 1.0)
        return m * upsilon * (upsilon + 1.0)

    def integrand(y):
        # Combined exponent: avoids spurious overflow when the density
        # kills a large score term.
        return math.exp(upsilon * (score.f1_det.logpdf(y) - score.f0_det.logpdf(y)) + f_i.logpdf(y))

    try:
        val = _quad_full_line(integrand, _integration_breakpoints(score),
                              f"mgf at upsilon={upsilon}", tol=1e-9)
    except (ModelError, OverflowError) as exc:
        raise ModelError(f"log_mgf outside finiteness region at upsilon={upsilon}") from exc
    if val <= 0 or not math.isfinite(val):
        raise ModelError(f"log_mgf outside finiteness region at upsilon={upsilon}")
    return math.log(val)


def _find_positive_root(lam0: Callable[[float], float]) -> float:
    """Positive root of the convex log-MGF (the root other than 0)."""
    lo, hi = None, None
    v = 1.0
    for _ in range(64):
        try:
            val = lam0(v)
        except ModelError:
            break
        if abs(val) < 1e-13:
            return v
        if val > 0:
            hi = v
            break
        lo = v
        v *= 2.0
    if hi is None:
        raise ModelError("tail condition unsatisfiable: log-MGF has no positive root in range")
    if lo is None:
        # Lambda0(1) > 0: shrink toward 0 where Lambda0 < 0 (drift m0 < 0).
        v = hi / 2.0
        for _ in range(64):
            if lam0(v) < 0:
                lo = v
                break
            v /= 2.0
        if lo is None:
            raise ModelError("tail condition unsatisfiable: cannot bracket positive root")
    return optimize.brentq(lam0, lo, hi, xtol=1e-13, rtol=8.9e-16)


def solve_upsilon_plus(lam0: Callable[[float], float], rho_a: float) -> float:
    """Root of Lambda0(v) = rho_a above the positive root of Lambda0.

    ``lam0`` must be convex with Lambda0(0) = 0 and negative slope at 0.
    """
    if not rho_a > 0:
        raise ValueError(f"rho_a must be positive, got {rho_a}")
    ups0 = _find_positive_root(lam0)
    g = lambda v: lam0(v) - rho_a
    lo = ups0
    hi = None
    step = max(ups0, 1.0)
    v = ups0 + step
    for _ in range(64):
        try:
            val = g(v)
        except ModelError as exc:
            raise ModelError("tail condition unsatisfiable: no bracket inside finiteness region") from exc
        if val > 0:
            hi = v
            break
        lo = v
        v += step
        step *= 2.0
    if hi is None:
        raise ModelError("tail condition unsatisfiable: no bracket inside finiteness region")
    ups = optimize.brentq(g, lo, hi, xtol=1e-13, rtol=8.9e-16)
    if abs(lam0(ups) - rho_a) > 1e-10:
        raise ModelError(f"upsilon_plus solve failed to converge: residual {lam0(ups) - rho_a}")
    return ups


def tail_rate(law: ChangeTimeLaw) -> TailRate:
    """Exponential rate of P{tau >= n}; the slowest component dominates."""
    if isinstance(law, Geometric):
        return TailRate(-math.log1p(-law.rho))
    return TailRate(min(-math.log1p(-law.rho_slow), -math.log1p(-law.rho_fast)))


def estimate_tail_rate(samples: Sequence[int]) -> float:
    """Least-squares slope of the log empirical survival function.

    The fit is restricted to the part of the curve supported by at least
    50 samples, where the geometric tail is resolved.
    """
    arr = np.asarray(samples)
    if arr.size < 1000:
        raise ValueError(f"need at least 1000 samples, got {arr.size}")
    if arr.min() == arr.max():
        raise ValueError("degenerate samples: all change times equal")
    n_max = int(arr.max())
    counts = np.bincount(arr.astype(np.int64), minlength=n_max + 1)
    survival = arr.size - np.concatenate(([0], np.cumsum(counts[:-1])))  # S(n) = #{tau >= n}
    keep = survival >= 50
    ns = np.nonzero(keep)[0]
    logs = np.log(survival[keep] / arr.size)
    slope = np.polyfit(ns, logs, 1)[0]
    return float(-slope)


def approx_threshold(kappa: float, ups_plus: float) -> float:
    """Large-kappa optimal-threshold approximation log(kappa)/upsilon_plus."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    return math.log(kappa) / ups_plus


def approx_cost(kappa: float, ups_plus: float, m1: float) -> float:
    """Large-kappa optimal-cost approximation log(kappa)/(m1 upsilon_plus)."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    return math.log(kappa) / (m1 * ups_plus)


def match_scales(sigma: float = 1.0) -> tuple[float, float]:
    """Laplace and Cauchy scales matched to a reference gaussian.

    b matches the variance; gamma equates the cauchy and gaussian cdfs at
    one reference standard deviation.
    """
    b = math.sqrt(sigma * sigma / 2.0)
    target = float(ndtr(1.0))

    def gap(g):
        return 0.5 + math.atan(sigma / g) / math.pi - target

    gamma = optimize.brentq(gap, 1e-8 * sigma, 100.0 * sigma, xtol=1e-14)
    return b, gamma


def make_case(case: str, mu1: float = 0.5, sigma: float = 1.0):
    """Observation truth plus one of the three detector score functions.

    case1 is the ideal gaussian detector; case2/case3 are the
    variance-matched laplace and cdf-matched cauchy detectors run against
    the same gaussian observations.
    """
    truth = (DensitySpec("gaussian", 0.0, sigma), DensitySpec("gaussian", mu1, sigma))
    if case == "case1":
        det = truth
    elif case == "case2":
        b, _ = match_scales(sigma)
        det = (DensitySpec("laplace", 0.0, b), DensitySpec("laplace", mu1, b))
    elif case == "case3":
        _, gamma = match_scales(sigma)
        det = (DensitySpec("cauchy", 0.0, gamma), DensitySpec("cauchy", mu1, gamma))
    else:
        raise ValueError(f"unknown case {case!r}; expected case1|case2|case3")
    return truth, ScoreFunction.build(det[0], det[1], truth)


def lambda0_for(score: ScoreFunction, f0_true: DensitySpec) -> Callable[[float], float]:
    """Lambda0 as a plain callable, for the root solvers."""
    return lambda v: log_mgf(score, f0_true, v)
