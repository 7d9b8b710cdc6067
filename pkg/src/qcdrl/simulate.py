"""Episode generation under the conditional-i.i.d. change model, cost
accounting for the eager and classic objectives, and the Monte-Carlo
threshold-evaluation protocol.

Timing convention: the decision state at time k incorporates observations
0..k-1, so the state at time 0 is exactly the detector's initial value and
a stop at time 0 is possible before anything is observed.  Observation k
is drawn post-change exactly when k >= tau_a.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import expit, logit

from .detectors import (
    SR_CAP,
    Cusum,
    DetectorKind,
    ShiryaevPosterior,
    ShiryaevRoberts,
)
from .models import (
    ChangeTimeLaw,
    DensitySpec,
    Geometric,
    GeometricMixture,
    ScoreFunction,
)

CHUNK = 256


def mean_change_time(law: ChangeTimeLaw) -> float:
    if isinstance(law, Geometric):
        return (1.0 - law.rho) / law.rho
    slow = (1.0 - law.rho_slow) / law.rho_slow
    fast = (1.0 - law.rho_fast) / law.rho_fast
    return law.p * slow + (1.0 - law.p) * fast


def default_horizon_cap(law: ChangeTimeLaw) -> int:
    rho = law.rho if isinstance(law, Geometric) else min(law.rho_slow, law.rho_fast)
    return int(math.ceil(100.0 / rho))


@dataclass(frozen=True)
class ObservationModel:
    f0: DensitySpec
    f1: DensitySpec
    change_law: ChangeTimeLaw


@dataclass(frozen=True)
class ExperimentConfig:
    model: ObservationModel
    detector: DetectorKind
    score: ScoreFunction
    kappa: float
    horizon_cap: int
    seed: int

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.horizon_cap < 10 * mean_change_time(self.model.change_law):
            raise ValueError(
                f"horizon_cap {self.horizon_cap} is below 10x the mean change time"
            )


@dataclass(frozen=True)
class Episode:
    tau_a: int
    tau_s: int
    capped: bool
    saturated: bool = False
    trajectory: Optional[list] = None


@dataclass(frozen=True)
class CostRecord:
    delay: int
    eagerness: int
    false_alarm: int
    eager_cost: float

    @classmethod
    def from_times(cls, tau_a: int, tau_s: int, kappa: float) -> "CostRecord":
        delay = max(tau_s - tau_a, 0)
        eagerness = max(tau_a - tau_s, 0)
        return cls(delay, eagerness, int(tau_s < tau_a), delay + kappa * eagerness)


def classic_cost(record: CostRecord, kappa: float) -> float:
    """Delay plus kappa times the false-alarm indicator."""
    return record.delay + kappa * record.false_alarm


@dataclass
class EpisodeStreams:
    """Independent per-episode sub-generators, keyed by (seed, index).

    Pre- and post-change observations come from distinct streams so that
    conditioning on the change time never shifts the other stream.
    """

    change: Generator
    pre: Generator
    post: Generator
    policy: Generator

    @classmethod
    def for_episode(cls, seed: int, index: int) -> "EpisodeStreams":
        children = SeedSequence((seed, index)).spawn(4)
        return cls(*(Generator(Philox(s)) for s in children))


def sample_change_time(law: ChangeTimeLaw, rng: Generator) -> int:
    """Draw tau_a with P{tau_a = k} = rho (1-rho)^k on k >= 0."""
    if isinstance(law, Geometric):
        return int(rng.geometric(law.rho)) - 1
    rho = law.rho_slow if rng.random() < law.p else law.rho_fast
    return int(rng.geometric(rho)) - 1


def sample_observation(k: int, tau_a: int, f0: DensitySpec, f1: DensitySpec,
                       streams: EpisodeStreams) -> float:
    if k < tau_a:
        return float(f0.sample(streams.pre))
    return float(f1.sample(streams.post))


def _observation_chunk(streams: EpisodeStreams, tau_a: int, f0: DensitySpec,
                       f1: DensitySpec, start: int, count: int) -> np.ndarray:
    """Observations for indices [start, start+count), split across streams."""
    n_pre = min(max(tau_a - start, 0), count)
    parts = []
    if n_pre:
        parts.append(f0.sample(streams.pre, size=n_pre))
    if count - n_pre:
        parts.append(f1.sample(streams.post, size=count - n_pre))
    return parts[0] if len(parts) == 1 else np.concatenate(parts)


class StatePathBuffer:
    """Lazily extended detector state path for one episode.

    The state evolution is input-independent (the input only decides when
    to stop), so the path can be materialized ahead of any policy.
    ``states[k]`` is the decision state at time k.
    """

    def __init__(self, config: ExperimentConfig, streams: EpisodeStreams, tau_a: int):
        self.config = config
        self.streams = streams
        self.tau_a = tau_a
        self.states = np.zeros(1)
        self.obs = np.zeros(0)
        self.max_state = 0.0
        self.saturated = False

    def __len__(self) -> int:
        return len(self.states)

    def extend(self, chunk: int = CHUNK) -> None:
        cfg = self.config
        start = len(self.obs)
        ys = _observation_chunk(self.streams, self.tau_a, cfg.model.f0, cfg.model.f1,
                                start, chunk)
        w0 = float(self.states[-1])
        det = cfg.detector
        if isinstance(det, Cusum):
            new = _cusum_path(w0, cfg.score(ys))
        elif isinstance(det, ShiryaevRoberts):
            new, hit_cap = _sr_path(w0, cfg.score(ys))
            self.saturated = self.saturated or hit_cap
        else:
            llr = cfg.model.f1.logpdf(ys) - cfg.model.f0.logpdf(ys)
            new = _posterior_path(w0, llr, det.rho)
        self.obs = np.concatenate([self.obs, ys])
        self.states = np.concatenate([self.states, new])
        self.max_state = max(self.max_state, float(new.max()))

    def state(self, k: int) -> float:
        while k >= len(self.states):
            self.extend()
        return float(self.states[k])

    def ensure(self, n: int) -> None:
        while len(self.states) < n:
            self.extend()


def _cusum_path(w0: float, llrs: np.ndarray) -> np.ndarray:
    # Closed form for the reflected walk: W_k = S_k - min(min_j<=k S_j, -w0).
    s = np.concatenate(([0.0], np.cumsum(llrs)))
    runmin = np.minimum.accumulate(s)
    return s[1:] - np.minimum(runmin[1:], -w0)


def _sr_path(w0: float, llrs: np.ndarray) -> tuple[np.ndarray, bool]:
    # Affine recursion W' = e^L (W + 1), unrolled in log space.
    s = np.concatenate(([0.0], np.cumsum(llrs)))
    log_t = np.logaddexp.accumulate(-s[:-1])
    with np.errstate(divide="ignore"):
        log_w = s[1:] + np.logaddexp(math.log(w0) if w0 > 0 else -np.inf, log_t)
    capped = log_w >= math.log(SR_CAP)
    return np.where(capped, SR_CAP, np.exp(log_w)), bool(capped.any())


def _posterior_path(p0: float, llrs: np.ndarray, rho: float) -> np.ndarray:
    # Posterior odds follow O' = e^L (O + rho) / (1 - rho); unroll in log space.
    log_a = np.concatenate(([0.0], np.cumsum(llrs - math.log1p(-rho))))
    log_t = np.logaddexp.accumulate(-log_a[:-1])
    log_o0 = logit(p0) if p0 < 1.0 else np.inf
    log_o = np.logaddexp(log_a[1:] + log_o0, math.log(rho) + log_a[1:] + log_t)
    return expit(log_o)


def run_episode(config: ExperimentConfig, policy: Callable[[float], int],
                streams: EpisodeStreams,
                record_trajectory: bool = False) -> tuple[Episode, CostRecord]:
    """Run one episode under an arbitrary state-feedback policy.

    Stops at the first u = 1 or at the horizon cap (flagged, with the
    forced final input recorded as 1).
    """
    tau_a = sample_change_time(config.model.change_law, streams.change)
    buf = StatePathBuffer(config, streams, tau_a)
    cap = config.horizon_cap
    trajectory = [] if record_trajectory else None
    tau_s = cap
    capped = True
    for k in range(cap + 1):
        w = buf.state(k)
        u = 1 if k == cap else int(policy(w))
        if u == 1:
            tau_s = k
            capped = k == cap
            if record_trajectory:
                trajectory.append((w, math.nan, 1))
            break
        buf.state(k + 1)  # materialize the next state (consumes obs k)
        if record_trajectory:
            trajectory.append((w, float(buf.obs[k]), 0))
    episode = Episode(tau_a, tau_s, capped, buf.saturated, trajectory)
    return episode, CostRecord.from_times(tau_a, tau_s, config.kappa)


def _episode_first_passage(config: ExperimentConfig, grid: np.ndarray,
                           episode_index: int) -> tuple[int, np.ndarray, bool]:
    """First-passage times of one shared sample path over a threshold grid."""
    streams = EpisodeStreams.for_episode(config.seed, episode_index)
    tau_a = sample_change_time(config.model.change_law, streams.change)
    buf = StatePathBuffer(config, streams, tau_a)
    cap = config.horizon_cap
    gmax = grid[-1]
    while buf.max_state < gmax and len(buf) < cap + 1:
        buf.extend()
    states = buf.states[: cap + 1]
    runmax = np.maximum.accumulate(states)
    fp = np.searchsorted(runmax, grid, side="left")
    capped = fp >= len(runmax)
    fp = np.where(capped, cap, fp)
    return tau_a, fp, bool(capped.any())


@dataclass(frozen=True)
class EvalResult:
    h: float
    mde: float
    mdd: float
    p_fa: float
    cost: float
    se_mde: float
    se_mdd: float
    se_p_fa: float
    se_cost: float
    cap_fraction: float
    n_paths: int


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def evaluate_threshold(h: float, config: ExperimentConfig, n_paths: int,
                       episode_offset: int = 0) -> EvalResult:
    """Monte-Carlo eagerness/delay/false-alarm averages for one threshold."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    grid = np.asarray([h], dtype=float)
    taus = np.empty(n_paths, dtype=np.int64)
    fps = np.empty(n_paths, dtype=np.int64)
    caps = np.zeros(n_paths, dtype=bool)
    for i in range(n_paths):
        tau_a, fp, capped = _episode_first_passage(config, grid, episode_offset + i)
        taus[i] = tau_a
        fps[i] = fp[0]
        caps[i] = capped
    eag = np.maximum(taus - fps, 0)
    delay = np.maximum(fps - taus, 0)
    fa = (fps < taus).astype(float)
    cost = delay + config.kappa * eag
    return EvalResult(
        h=float(h),
        mde=float(eag.mean()), mdd=float(delay.mean()), p_fa=float(fa.mean()),
        cost=float(cost.mean()),
        se_mde=_se(eag), se_mdd=_se(delay), se_p_fa=_se(fa), se_cost=_se(cost),
        cap_fraction=float(caps.mean()), n_paths=n_paths,
    )


@dataclass(frozen=True)
class SweepTable:
    grid: np.ndarray
    mde: np.ndarray
    mdd: np.ndarray
    se_mde: np.ndarray
    se_mdd: np.ndarray
    rep_mde: np.ndarray  # (n_repeats, len(grid))
    rep_mdd: np.ndarray
    cap_fraction: float

    def rows(self):
        for j in range(len(self.grid)):
            yield (self.grid[j], self.mde[j], self.mdd[j], self.se_mde[j], self.se_mdd[j])


def _sweep_batch(args) -> tuple[np.ndarray, np.ndarray, float]:
    config, grid, n_paths, offset = args
    T = len(grid)
    eag_sum = np.zeros(T)
    delay_sum = np.zeros(T)
    ncap = 0
    for i in range(n_paths):
        tau_a, fp, capped = _episode_first_passage(config, grid, offset + i)
        eag_sum += np.maximum(tau_a - fp, 0)
        delay_sum += np.maximum(fp - tau_a, 0)
        ncap += capped
    return eag_sum / n_paths, delay_sum / n_paths, ncap / n_paths


def parallel_map(fn, items, workers: int = 1):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def sweep_thresholds(grid: Sequence[float], config: ExperimentConfig, n_paths: int,
                     n_repeats: int, episode_offset: int = 0,
                     workers: int = 1) -> SweepTable:
    """Shared-path threshold sweep, repeated over independent batches.

    One episode batch serves every threshold: each path is simulated to
    the top of the grid and first-passage times are read off per
    threshold, which keeps the curve shape noise-free across h.
    """
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("threshold grid must be non-empty and sorted ascending")
    tasks = [
        (config, grid, n_paths, episode_offset + m * n_paths)
        for m in range(n_repeats)
    ]
    results = parallel_map(_sweep_batch, tasks, workers)
    rep_mde = np.stack([r[0] for r in results])
    rep_mdd = np.stack([r[1] for r in results])
    cap_fraction = float(np.mean([r[2] for r in results]))
    mde = rep_mde.mean(axis=0)
    mdd = rep_mdd.mean(axis=0)
    if n_repeats > 1:
        se_mde = rep_mde.std(axis=0, ddof=1) / math.sqrt(n_repeats)
        se_mdd = rep_mdd.std(axis=0, ddof=1) / math.sqrt(n_repeats)
    else:
        se_mde = np.zeros_like(mde)
        se_mdd = np.zeros_like(mdd)
    return SweepTable(grid, mde, mdd, se_mde, se_mdd, rep_mde, rep_mdd, cap_fraction)


@dataclass(frozen=True)
class OptimalThreshold:
    h_star: float
    j_star: float
    se_j: float
    index: int


def optimal_threshold(table: SweepTable, kappa: float) -> OptimalThreshold:
    """Grid argmin of kappa MDE(h) + MDD(h); ties go to the smaller h."""
    cost = kappa * table.mde + table.mdd
    idx = int(np.argmin(cost))  # first minimum = smallest h on ties
    rep_cost = kappa * table.rep_mde[:, idx] + table.rep_mdd[:, idx]
    se = _se(rep_cost)
    return OptimalThreshold(float(table.grid[idx]), float(cost[idx]), se, idx)


def per_repeat_optima(table: SweepTable, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-repeat argmin thresholds and costs, for confidence bands."""
    rep_cost = kappa * table.rep_mde + table.rep_mdd
    idx = np.argmin(rep_cost, axis=1)
    return table.grid[idx], rep_cost[np.arange(len(idx)), idx]


@dataclass(frozen=True)
class ShiftedCurves:
    """Asymptotic threshold/cost curves shifted to match Monte-Carlo anchors."""

    ups_plus: float
    m1: float
    anchor_h: float
    anchor_j: float
    anchor_kappa: float = 100.0

    def threshold(self, kappa: float) -> float:
        return math.log(kappa / self.anchor_kappa) / self.ups_plus + self.anchor_h

    def cost(self, kappa: float) -> float:
        return math.log(kappa / self.anchor_kappa) / (self.m1 * self.ups_plus) + self.anchor_j


def shifted_curves(ups_plus: float, m1: float, anchors: tuple[float, float],
                   anchor_kappa: float = 100.0) -> ShiftedCurves:
    return ShiftedCurves(ups_plus, m1, anchors[0], anchors[1], anchor_kappa)
