"""Q-learning over linear function classes: smooth and binned bases,
scalar and Zap matrix gains, epsilon-greedy oblivious exploration with
episode stringing, reset safeguards, policy extraction, and the mean-flow
Jacobian diagnostic."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import models
from .simulate import (
    EpisodeStreams,
    ExperimentConfig,
    StatePathBuffer,
    sample_change_time,
)

_INIT_STREAM_KEY = 2**63 - 1  # reserved episode index for init/reset draws


@dataclass(frozen=True)
class SmoothBasis:
    """Five-component basis: per-input blocks built from x and x exp(-x/b_q)."""

    b_q: float

    def __post_init__(self):
        if not self.b_q > 0:
            raise ValueError(f"b_q must be positive, got {self.b_q}")

    @property
    def d(self) -> int:
        return 5

    def features(self, x: float, u: int) -> np.ndarray:
        q = x * math.exp(-x / self.b_q)
        if u == 0:
            return np.array([x, q, 0.0, 0.0, 0.0])
        return np.array([0.0, 0.0, 1.0, x, q])

    def q_pair(self, theta: np.ndarray, x: float) -> tuple[float, float]:
        """(Q(x,0), Q(x,1)) without building feature vectors."""
        q = x * math.exp(-x / self.b_q)
        t0, t1, t2, t3, t4 = theta
        return t0 * x + t1 * q, t2 + t3 * x + t4 * q


@dataclass(frozen=True)
class BinnedBasis:
    """Indicator features 1{x in bin_j, u = u_i}; one block per input.

    The rightmost bin is half-open to +inf and values below the first edge
    clip into bin 0.  ``drop_first`` removes one redundant bin per input,
    matching the 2(d0-1) accounting.
    """

    edges: tuple
    drop_first: bool = False

    def __post_init__(self):
        if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("need at least two strictly increasing bin edges")

    @property
    def n_bins(self) -> int:
        return len(self.edges)

    @property
    def d(self) -> int:
        per_input = self.n_bins - 1 if self.drop_first else self.n_bins
        return 2 * per_input

    def bin_index(self, x: float) -> int:
        idx = int(np.searchsorted(self.edges, x, side="right")) - 1
        return min(max(idx, 0), self.n_bins - 1)

    def features(self, x: float, u: int) -> np.ndarray:
        out = np.zeros(self.d)
        per_input = self.d // 2
        j = self.bin_index(x)
        if self.drop_first:
            j -= 1
            if j < 0:
                return out
        out[u * per_input + j] = 1.0
        return out

    def q_pair(self, theta: np.ndarray, x: float) -> tuple[float, float]:
        per_input = self.d // 2
        j = self.bin_index(x)
        if self.drop_first:
            j -= 1
            if j < 0:
                return 0.0, 0.0
        return float(theta[j]), float(theta[per_input + j])


Basis = Union[SmoothBasis, BinnedBasis]


def feature_eval(basis, x: float, u: int) -> np.ndarray:
    return basis.features(x, u)


def q_value(basis, theta: np.ndarray, x: float, u: int) -> float:
    pair = basis.q_pair(theta, x)
    return pair[u]


def stage_cost(u: int, k: int, tau_a: int, kappa: float) -> float:
    """Running delay cost while not stopping, eagerness penalty at the stop."""
    if u == 0:
        return 1.0 if tau_a <= k else 0.0
    return kappa * max(tau_a - k, 0)


def greedy_input(basis, theta: np.ndarray, x: float) -> int:
    """Cost-minimizing input; ties resolve to stopping."""
    q0, q1 = basis.q_pair(theta, x)
    return 1 if q1 <= q0 else 0


def td_update(basis, theta: np.ndarray, gain, transition, alpha: float):
    """One temporal-difference step on the linear parameters.

    ``transition`` is (w, u, c, w_next); ``gain`` is a scalar or a d x d
    matrix.  Returns (theta', residual); a non-finite residual leaves theta
    unchanged so the caller can count the rejection.
    """
    w, u, c, w_next = transition
    q_sa = q_value(basis, theta, w, u)
    target = c + min(basis.q_pair(theta, w_next))
    d_res = target - q_sa
    if not math.isfinite(d_res):
        return theta, d_res
    zeta = basis.features(w, u)
    if np.ndim(gain) == 2:
        step = alpha * d_res * (gain @ zeta)
    else:
        step = alpha * d_res * gain * zeta
    return theta + step, d_res


def zap_gain_update(ahat: np.ndarray, basis, theta: np.ndarray, transition,
                    beta: float) -> np.ndarray:
    """Track the mean-flow Jacobian: ahat + beta (zeta (psi' - psi)^T - ahat)."""
    w, u, _, w_next = transition
    zeta = basis.features(w, u)
    psi_next = basis.features(w_next, greedy_input(basis, theta, w_next))
    a_k = np.outer(zeta, psi_next - zeta)
    return ahat + beta * (a_k - ahat)


def zap_direction(ahat: np.ndarray, zeta: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    """-(ahat - ridge I)^{-1} zeta, bumping the ridge tenfold when singular."""
    d = len(zeta)
    eye = np.eye(d)
    while True:
        try:
            return -np.linalg.solve(ahat - ridge * eye, zeta), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
            warnings.warn(f"zap gain matrix singular; ridge increased to {ridge}")


@dataclass(frozen=True)
class ExplorationSchedule:
    """Linear decay of the oblivious-action probability, then a floor."""

    eps0: float = 1.0
    eps_f: float = 0.1
    n0: int = 1000
    eta: float = 0.5
    delta: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.eps_f <= self.eps0 <= 1.0:
            raise ValueError(f"need 0 < eps_f <= eps0 <= 1, got ({self.eps0}, {self.eps_f})")
        if not self.delta > self.eta > 0.0:
            raise ValueError(f"need delta > eta > 0, got ({self.eta}, {self.delta})")


def epsilon_schedule(n: int, schedule: ExplorationSchedule) -> float:
    """eps decays linearly from eps0 to eps_f over n0 episodes, then holds."""
    s = schedule
    return max(s.eps_f, s.eps0 + (n / s.n0) * (s.eps_f - s.eps0))


def draw_oblivious_threshold(kappa: float, ups_plus: float, eta: float, delta: float,
                             rng: np.random.Generator) -> float:
    """Uniform threshold draw from the interval around the asymptotic optimum."""
    if not delta > eta > 0:
        raise ValueError(f"need delta > eta > 0, got ({eta}, {delta})")
    center = models.approx_threshold(kappa, ups_plus) + eta
    lo, hi = center - delta, center + delta
    if lo < 0:
        warnings.warn(f"oblivious interval lower end {lo:.3f} clipped at 0")
        lo = 0.0
    return float(rng.uniform(lo, hi))


def behavior_input(w: float, theta: np.ndarray, basis, eps_n: float, h_obl: float,
                   rng: np.random.Generator) -> int:
    """Oblivious threshold rule with probability eps_n, else greedy."""
    if rng.random() < eps_n:
        return int(w >= h_obl)
    return greedy_input(basis, theta, w)


@dataclass(frozen=True)
class QLearnSettings:
    """Trainer knobs.  The Zap default stepsize 1/(k+k0) makes the matrix-gain
    recursion behave like recursive least squares, which the heavy-tailed
    stopping costs need at short run lengths; the scalar gain keeps the
    classic sub-linear decay."""

    gain: str = "zap"  # zap | scalar
    schedule: ExplorationSchedule = field(default_factory=ExplorationSchedule)
    alpha_exponent: Optional[float] = None  # default: 1.0 for zap, 0.8 for scalar
    beta_exponent: float = 0.85
    k0: int = 100
    reset_bound: float = 5e3
    init_range: float = 100.0
    ridge: Optional[float] = None
    pr_burn_fraction: float = 0.1  # PR averaging starts after this episode share

    def __post_init__(self):
        if self.gain not in ("zap", "scalar"):
            raise ValueError(f"gain must be 'zap' or 'scalar', got {self.gain!r}")

    def resolved_alpha_exponent(self) -> float:
        if self.alpha_exponent is not None:
            return self.alpha_exponent
        return 1.0 if self.gain == "zap" else 0.8


@dataclass(frozen=True)
class QTrainResult:
    theta_trace: np.ndarray  # (n_episodes, d), theta after each episode
    pr_trace: np.ndarray     # (n_episodes, d), running PR average
    theta_pr: np.ndarray
    theta_final: np.ndarray
    resets: int
    reset_episodes: np.ndarray
    xi_total: int            # strung sample count, >= n_episodes
    rejected: int
    cap_hits: int
    transitions: Optional[list] = None


def _resolve_ups_plus(config: ExperimentConfig) -> float:
    lam0 = models.lambda0_for(config.score, config.model.f0)
    rho_a = models.tail_rate(config.model.change_law).rho_a
    return models.solve_upsilon_plus(lam0, rho_a)


def default_b_q(config: ExperimentConfig, ups_plus: Optional[float] = None) -> float:
    """Smooth-basis length scale: the asymptotic optimal threshold.

    Larger scales push the bump of x exp(-x/b_q) past the explored region
    and produce spurious greedy-rule crossings there.
    """
    ups = ups_plus if ups_plus is not None else _resolve_ups_plus(config)
    return models.approx_threshold(max(config.kappa, math.e), ups)


def train(config: ExperimentConfig, basis, settings: QLearnSettings, n_episodes: int,
          theta0: Optional[np.ndarray] = None, ups_plus: Optional[float] = None,
          episode_offset: int = 0, record_transitions: bool = False) -> QTrainResult:
    """Q-learning over strung episodes under the epsilon-greedy behavior.

    Episodes are concatenated: the stopping step's successor state is the
    next episode's initial state, and the strung step index drives the
    stepsize schedules.  When the iterate's sup-norm exceeds the reset
    bound, the whole recursion restarts from a fresh uniform draw (iterate,
    gain matrix, and stepsize clocks).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    d = basis.d
    ridge0 = settings.ridge if settings.ridge is not None else 1e-6 * d
    ridge = ridge0
    ups = ups_plus if ups_plus is not None else _resolve_ups_plus(config)
    init_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((config.seed, _INIT_STREAM_KEY)))
    )
    theta = (np.asarray(theta0, dtype=float).copy() if theta0 is not None
             else init_rng.uniform(-settings.init_range, settings.init_range, d))
    if theta.shape != (d,):
        raise ValueError(f"theta0 must have shape ({d},), got {theta.shape}")
    ahat = -np.eye(d)  # unit-gain warm start; the data overwrites it quickly
    pr_sum = np.zeros(d)
    pr_n = 0
    pr_start = int(settings.pr_burn_fraction * n_episodes)
    alpha_exp = settings.resolved_alpha_exponent()
    k_global = 0
    k_clock = 0  # strung index since the last restart
    resets = 0
    rejected = 0
    cap_hits = 0
    reset_episodes = []
    theta_trace = np.empty((n_episodes, d))
    pr_trace = np.empty((n_episodes, d))
    transitions = [] if record_transitions else None
    sched = settings.schedule
    zap = settings.gain == "zap"
    cap = config.horizon_cap

    for n in range(n_episodes):
        streams = EpisodeStreams.for_episode(config.seed, episode_offset + n)
        tau_a = sample_change_time(config.model.change_law, streams.change)
        buf = StatePathBuffer(config, streams, tau_a)
        eps_n = epsilon_schedule(n, sched)
        h_obl = draw_oblivious_threshold(config.kappa, ups, sched.eta, sched.delta,
                                         streams.policy)
        for k in range(cap + 1):
            w = buf.state(k)
            if k == cap:
                u = 1
                cap_hits += 1
            else:
                u = behavior_input(w, theta, basis, eps_n, h_obl, streams.policy)
            c = stage_cost(u, k, tau_a, config.kappa)
            w_next = 0.0 if u == 1 else buf.state(k + 1)
            transition = (w, u, c, w_next)
            if record_transitions:
                transitions.append(transition)
            k_global += 1
            k_clock += 1
            alpha = (k_clock + settings.k0) ** (-alpha_exp)
            if zap:
                beta = (k_clock + settings.k0) ** (-settings.beta_exponent)
                ahat = zap_gain_update(ahat, basis, theta, transition, beta)
                zeta = basis.features(w, u)
                direction, ridge = zap_direction(ahat, zeta, ridge)
                q_sa = float(theta @ zeta)
                d_res = c + min(basis.q_pair(theta, w_next)) - q_sa
                if math.isfinite(d_res):
                    theta = theta + alpha * d_res * direction
                else:
                    rejected += 1
            else:
                theta, d_res = td_update(basis, theta, 1.0, transition, alpha)
                if not math.isfinite(d_res):
                    rejected += 1
            if rejected > 100 and rejected > 0.5 * k_global:
                raise RuntimeError(
                    f"aborting: {rejected}/{k_global} rejected steps (non-finite residuals)"
                )
            if np.abs(theta).max() > settings.reset_bound:
                theta = init_rng.uniform(-settings.init_range, settings.init_range, d)
                ahat = -np.eye(d)
                ridge = ridge0
                k_clock = 0
                resets += 1
                reset_episodes.append(n)
            if n >= pr_start:
                pr_sum += theta
                pr_n += 1
            if u == 1:
                break
        theta_trace[n] = theta
        pr_trace[n] = pr_sum / pr_n if pr_n else theta
    theta_pr = pr_sum / pr_n if pr_n else theta.copy()
    return QTrainResult(
        theta_trace, pr_trace, theta_pr, theta.copy(), resets,
        np.asarray(reset_episodes, dtype=np.int64), k_global, rejected, cap_hits,
        transitions,
    )


@dataclass(frozen=True)
class ExtractedPolicy:
    is_threshold: bool
    h_theta: float
    crossings: tuple

    def as_policy(self):
        h = self.h_theta
        return lambda w: int(w >= h)


def extract_policy(basis, theta: np.ndarray, x_max: float,
                   n_grid: int = 512, tol: float = 1e-8) -> ExtractedPolicy:
    """Scan the greedy rule 1{Q(x,0) >= Q(x,1)} for threshold structure.

    A single switch from continue to stop is a threshold policy; the switch
    point is located by bisection.  Multiple switches report the smallest
    crossing with the threshold flag cleared.
    """
    if x_max <= 0:
        raise ValueError("x_max must be positive")
    grid = np.linspace(0.0, x_max, n_grid)

    def stops(x: float) -> bool:
        q0, q1 = basis.q_pair(theta, x)
        return q1 <= q0

    flags = np.array([stops(x) for x in grid])
    switches = np.nonzero(flags[1:] != flags[:-1])[0]

    def refine(i: int) -> float:
        lo, hi = grid[i], grid[i + 1]
        lo_flag = flags[i]
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if stops(mid) == lo_flag:
                lo = mid
            else:
                hi = mid
        return hi

    if len(switches) == 0:
        return ExtractedPolicy(True, 0.0 if flags[0] else math.inf, ())
    crossings = tuple(refine(i) for i in switches)
    is_threshold = len(switches) == 1 and not flags[0] and flags[-1]
    return ExtractedPolicy(is_threshold, crossings[0], crossings)


@dataclass(frozen=True)
class MeanFlowEstimate:
    fbar: np.ndarray
    se: np.ndarray
    n_steps: int


def mean_flow_field(config: ExperimentConfig, basis, theta: np.ndarray, eps: float,
                    n_steps: int, schedule: ExplorationSchedule,
                    ups_plus: Optional[float] = None,
                    episode_offset: int = 0) -> MeanFlowEstimate:
    """Monte-Carlo average of the feature-weighted Bellman residual at fixed theta."""
    ups = ups_plus if ups_plus is not None else _resolve_ups_plus(config)
    d = basis.d
    acc = np.zeros(d)
    acc_sq = np.zeros(d)
    done = 0
    episode = episode_offset
    cap = config.horizon_cap
    while done < n_steps:
        streams = EpisodeStreams.for_episode(config.seed, episode)
        episode += 1
        tau_a = sample_change_time(config.model.change_law, streams.change)
        buf = StatePathBuffer(config, streams, tau_a)
        h_obl = draw_oblivious_threshold(config.kappa, ups, schedule.eta, schedule.delta,
                                         streams.policy)
        for k in range(cap + 1):
            w = buf.state(k)
            u = 1 if k == cap else behavior_input(w, theta, basis, eps, h_obl, streams.policy)
            c = stage_cost(u, k, tau_a, config.kappa)
            w_next = 0.0 if u == 1 else buf.state(k + 1)
            zeta = basis.features(w, u)
            d_res = c + min(basis.q_pair(theta, w_next)) - float(theta @ zeta)
            v = zeta * d_res
            acc += v
            acc_sq += v * v
            done += 1
            if done >= n_steps or u == 1:
                break
        if done >= n_steps:
            break
    fbar = acc / done
    var = np.maximum(acc_sq / done - fbar**2, 0.0)
    return MeanFlowEstimate(fbar, np.sqrt(var / done), done)


@dataclass(frozen=True)
class JacobianReport:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    rhp_flag: bool
    fbar: np.ndarray
    fbar_se: np.ndarray
    unreliable: bool


def mean_flow_jacobian(config: ExperimentConfig, basis, theta_star: np.ndarray,
                       n_steps: int, delta_fd: float,
                       eps: float, schedule: ExplorationSchedule,
                       ups_plus: Optional[float] = None) -> JacobianReport:
    """Central finite differences of the mean flow around theta_star.

    The same episode streams are reused for every perturbation (common
    random numbers), so coordinates the data never touches difference to
    exactly zero.
    """
    ups = ups_plus if ups_plus is not None else _resolve_ups_plus(config)
    d = basis.d
    base = mean_flow_field(config, basis, theta_star, eps, n_steps, schedule, ups)
    jac = np.empty((d, d))
    unreliable = False
    for j in range(d):
        e = np.zeros(d)
        e[j] = delta_fd
        plus = mean_flow_field(config, basis, theta_star + e, eps, n_steps, schedule, ups)
        minus = mean_flow_field(config, basis, theta_star - e, eps, n_steps, schedule, ups)
        diff = plus.fbar - minus.fbar
        jac[:, j] = diff / (2.0 * delta_fd)
        joint_se = np.sqrt(plus.se**2 + minus.se**2)
        moved = np.abs(diff) > 0
        if np.any(moved & (np.abs(diff) < joint_se)):
            unreliable = True
    if unreliable:
        warnings.warn("Jacobian unreliable: finite differences within Monte-Carlo error")
    eig = np.linalg.eigvals(jac)
    return JacobianReport(jac, eig, bool(np.any(eig.real > 0)), base.fbar, base.se,
                          unreliable)
