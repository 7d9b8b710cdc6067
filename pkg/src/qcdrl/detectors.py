"""Surrogate information-state recursions (CUSUM, Shiryaev-Roberts,
Bayesian posterior) and the threshold stopping rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

SR_CAP = 1e300  # Shiryaev-Roberts statistic saturates here; flag propagates.


@dataclass(frozen=True)
class Cusum:
    pass


@dataclass(frozen=True)
class ShiryaevRoberts:
    pass


@dataclass(frozen=True)
class ShiryaevPosterior:
    """Posterior-probability detector assuming a geometric change prior."""

    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"posterior detector needs rho in (0,1), got {self.rho}")


DetectorKind = Union[Cusum, ShiryaevRoberts, ShiryaevPosterior]


def cusum_step(w, llr):
    """Reflected random-walk update max(0, w + llr)."""
    return np.maximum(0.0, w + llr)


def sr_step(w, llr):
    """Shiryaev-Roberts update exp(llr) (w + 1), saturating at SR_CAP."""
    log_next = llr + np.log1p(w)
    return np.where(log_next >= math.log(SR_CAP), SR_CAP, np.exp(log_next))


def _sigmoid(t):
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def posterior_step(p, y, rho, f0, f1):
    """One predict-then-update step of the change posterior.

    Predict applies the geometric hazard: g = p + (1-p) rho.  The Bayes
    update is evaluated through the log likelihood ratio so that extreme
    observations cannot underflow the densities.  p = 1 is absorbing.
    """
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    llr = np.atleast_1d(f1.logpdf(y) - f0.logpdf(y))
    g = p + (1.0 - p) * rho
    with np.errstate(divide="ignore"):
        t = llr + np.log(g) - np.log((1.0 - p) * (1.0 - rho))
    out = _sigmoid(t)
    out = np.where(p >= 1.0, 1.0, out)
    return float(out[0]) if scalar else out


def threshold_decision(w, h) -> int:
    """Stopping input: declare (u=1) exactly when the state reaches h."""
    return int(np.asarray(w) >= h)


def detector_step(kind: DetectorKind, state, y, score, truth):
    """Dispatch one state update for the given detector kind.

    CUSUM and Shiryaev-Roberts consume the detector score of the
    observation; the posterior detector is a Bayes filter and uses the
    true density pair.
    """
    if isinstance(kind, Cusum):
        return cusum_step(state, score(y))
    if isinstance(kind, ShiryaevRoberts):
        return sr_step(state, score(y))
    return posterior_step(state, y, kind.rho, truth[0], truth[1])


def initial_state(kind: DetectorKind) -> float:
    return 0.0
