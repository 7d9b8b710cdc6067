"""Score-function policy gradients for a logistic threshold policy:
episode simulation, the two gradient estimators, SGD with an optional
natural-gradient gain, Polyak-Ruppert averaging, and gradient profiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import expit

from . import models
from .simulate import (
    CHUNK,
    CostRecord,
    EpisodeStreams,
    ExperimentConfig,
    StatePathBuffer,
    parallel_map,
    sample_change_time,
)


@dataclass(frozen=True)
class LogisticPolicy:
    """Randomized threshold rule: stop probability expit(xi (w - theta))."""

    theta: float
    xi: float

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError(f"sharpness xi must be positive, got {self.xi}")

    def prob_stop(self, w):
        return expit(self.xi * (np.asarray(w, dtype=float) - self.theta))


def policy_prob(theta: float, xi: float, w, u: int):
    """Probability of input u at state w, stable for large |xi (w-theta)|."""
    t = xi * (np.asarray(w, dtype=float) - theta)
    return expit(t) if u == 1 else expit(-t)


def score(theta: float, xi: float, w, u):
    """d/dtheta of the log policy: -xi u + xi * prob_stop(w)."""
    return -xi * np.asarray(u, dtype=float) + xi * expit(xi * (np.asarray(w, dtype=float) - theta))


@dataclass(frozen=True)
class ACEpisode:
    tau_a: int
    tau_s: int
    capped: bool
    states: np.ndarray        # decision states w_0..w_{tau_s}
    inputs: np.ndarray        # u_0..u_{tau_s}; the last entry is the stop
    observations: np.ndarray  # the tau_s observations consumed along the way
    theta: float
    xi: float


@dataclass(frozen=True)
class GradientSample:
    value: float
    episode_length: int


def simulate_policy_episode(config: ExperimentConfig, policy: LogisticPolicy,
                            streams: EpisodeStreams) -> tuple[ACEpisode, CostRecord]:
    """One on-policy episode; the input at every step is drawn from the policy."""
    tau_a = sample_change_time(config.model.change_law, streams.change)
    buf = StatePathBuffer(config, streams, tau_a)
    cap = config.horizon_cap
    start = 0
    tau_s = cap
    capped = True
    while start <= cap:
        stop_idx = min(start + CHUNK, cap + 1)
        buf.ensure(stop_idx)
        ws = buf.states[start:stop_idx]
        stops = streams.policy.random(len(ws)) < policy.prob_stop(ws)
        if stops.any():
            tau_s = start + int(np.argmax(stops))
            capped = False
            break
        start = stop_idx
    states = buf.states[: tau_s + 1].copy()
    inputs = np.zeros(tau_s + 1, dtype=np.int64)
    inputs[-1] = 1
    episode = ACEpisode(tau_a, tau_s, capped, states, inputs, buf.obs[:tau_s].copy(),
                        policy.theta, policy.xi)
    return episode, CostRecord.from_times(tau_a, tau_s, config.kappa)


def _check_on_policy(episode: ACEpisode, policy: LogisticPolicy) -> None:
    if episode.theta != policy.theta or episode.xi != policy.xi:
        raise ValueError(
            f"episode generated at (theta={episode.theta}, xi={episode.xi}) "
            f"does not match policy (theta={policy.theta}, xi={policy.xi})"
        )


def _stage_costs(episode: ACEpisode, kappa: float) -> np.ndarray:
    ks = np.arange(episode.tau_s + 1)
    c = ((episode.inputs == 0) & (ks >= episode.tau_a)).astype(float)
    c[-1] += kappa * episode.inputs[-1] * max(episode.tau_a - episode.tau_s, 0)
    return c


def grad_episode_eligibility(episode: ACEpisode, policy: LogisticPolicy,
                             kappa: float) -> GradientSample:
    """Single-episode gradient: sum of stage costs times running score sums."""
    _check_on_policy(episode, policy)
    sig = score(policy.theta, policy.xi, episode.states, episode.inputs)
    s_run = np.cumsum(sig)
    value = float(_stage_costs(episode, kappa) @ s_run)
    return GradientSample(value, episode.tau_s + 1)


def grad_episode_qweighted(episode: ACEpisode, policy: LogisticPolicy,
                           q_estimates: Optional[Sequence[float]]) -> GradientSample:
    """Gradient built from per-step state-input value estimates.

    The caller supplies Q estimates for each visited (state, input) pair,
    for instance from independent Monte-Carlo rollouts.
    """
    _check_on_policy(episode, policy)
    if q_estimates is None:
        raise ValueError("missing q_estimates for the q-weighted gradient")
    q = np.asarray(q_estimates, dtype=float)
    if q.shape != (episode.tau_s + 1,):
        raise ValueError(
            f"q_estimates must have one entry per step, expected {episode.tau_s + 1}, got {q.shape}"
        )
    sig = score(policy.theta, policy.xi, episode.states, episode.inputs)
    return GradientSample(float(q @ sig), episode.tau_s + 1)


@dataclass
class SgdState:
    """Iterate, stepsize schedule, scalar matrix-gain state, and PR sum."""

    theta: float
    alpha0: float
    rho_step: float = 0.7
    theta_max: float = math.inf
    n: int = 0
    rhat: float = 1.0
    ridge: float = 1e-3
    pr_sum: float = 0.0
    rejected: int = 0

    def __post_init__(self):
        if not 0.5 < self.rho_step < 1.0:
            raise ValueError(f"stepsize exponent must lie in (1/2, 1), got {self.rho_step}")

    def alpha(self, n: int) -> float:
        return self.alpha0 * n ** (-self.rho_step)

    @property
    def theta_pr(self) -> float:
        return self.pr_sum / self.n if self.n else self.theta


def sgd_step(state: SgdState, grad_value: float, gain: float = 1.0) -> SgdState:
    """theta <- theta - alpha_{n+1} G grad, projected onto [0, theta_max].

    Non-finite gradients leave the iterate unchanged and are counted.
    """
    state.n += 1
    if math.isfinite(grad_value) and math.isfinite(gain):
        theta = state.theta - state.alpha(state.n) * gain * grad_value
        state.theta = min(max(theta, 0.0), state.theta_max)
    else:
        state.rejected += 1
    state.pr_sum += state.theta
    return state


def ngd_update(rhat: float, score_sq_sum: float, beta: float) -> float:
    """Matrix-gain tracker (scalar here): rhat + beta (score outer sum - rhat)."""
    return rhat + beta * (score_sq_sum - rhat)


def pr_average(iterates: Sequence[float]) -> float:
    """Running-mean estimate of the iterate sequence."""
    arr = np.asarray(iterates, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one iterate")
    return float(arr.mean())


@dataclass(frozen=True)
class ACTrainResult:
    thetas: np.ndarray        # theta_n after each episode
    theta_pr: np.ndarray      # running PR average
    rejected: int
    alpha0: float


def _pilot_alpha0(config: ExperimentConfig, policy: LogisticPolicy, theta_ref: float,
                  n_pilot: int, offset: int) -> float:
    grads = []
    for i in range(n_pilot):
        ep, _ = simulate_policy_episode(config, policy,
                                        EpisodeStreams.for_episode(config.seed, offset + i))
        grads.append(abs(grad_episode_eligibility(ep, policy, config.kappa).value))
    scale = float(np.mean(grads)) or 1.0
    return 0.1 * theta_ref / scale


def train_threshold_policy(config: ExperimentConfig, xi: float, n_iterations: int,
                           theta0: float = 1.0, rho_step: float = 0.7,
                           alpha0: Optional[float] = None, use_ngd: bool = True,
                           theta_ref: Optional[float] = None) -> ACTrainResult:
    """Episodic SGD on the threshold parameter.

    ``theta_ref`` scales both the projection bound (4x) and the automatic
    pilot stepsize; it defaults to the asymptotic optimal threshold for the
    configured score and change law.
    """
    if theta_ref is None:
        lam0 = models.lambda0_for(config.score, config.model.f0)
        rho_a = models.tail_rate(config.model.change_law).rho_a
        ups = models.solve_upsilon_plus(lam0, rho_a)
        theta_ref = models.approx_threshold(max(config.kappa, math.e), ups)
    policy = LogisticPolicy(theta0, xi)
    if alpha0 is None:
        alpha0 = _pilot_alpha0(config, policy, theta_ref, 32, n_iterations)
    state = SgdState(theta0, alpha0, rho_step, theta_max=4.0 * theta_ref)
    thetas = np.empty(n_iterations)
    pr = np.empty(n_iterations)
    for n in range(n_iterations):
        policy = LogisticPolicy(state.theta, xi)
        ep, _ = simulate_policy_episode(config, policy,
                                        EpisodeStreams.for_episode(config.seed, n))
        grad = grad_episode_eligibility(ep, policy, config.kappa)
        gain = 1.0
        if use_ngd:
            sig = score(policy.theta, policy.xi, ep.states, ep.inputs)
            beta = (n + 1) ** -0.6  # faster timescale than the iterate
            state.rhat = ngd_update(state.rhat, float(sig @ sig), beta)
            gain = 1.0 / (state.rhat + state.ridge)
        sgd_step(state, grad.value, gain)
        thetas[n] = state.theta
        pr[n] = state.theta_pr
    return ACTrainResult(thetas, pr, state.rejected, alpha0)


@dataclass(frozen=True)
class GradientProfile:
    thetas: np.ndarray
    grad_mean: np.ndarray
    grad_var: np.ndarray
    grad_se: np.ndarray
    j_mean: np.ndarray
    j_se: np.ndarray
    n_episodes: int


def _profile_point(args):
    config, xi, theta, n_episodes, offset = args
    policy = LogisticPolicy(theta, xi)
    grads = np.empty(n_episodes)
    costs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep, rec = simulate_policy_episode(config, policy,
                                          EpisodeStreams.for_episode(config.seed, offset + i))
        grads[i] = grad_episode_eligibility(ep, policy, config.kappa).value
        costs[i] = rec.eager_cost
    return (
        grads.mean(), grads.var(ddof=1), grads.std(ddof=1) / math.sqrt(n_episodes),
        costs.mean(), costs.std(ddof=1) / math.sqrt(n_episodes),
    )


def gradient_profile(config: ExperimentConfig, xi: float, theta_grid: Sequence[float],
                     n_per_point: int, episode_offset: int = 0,
                     workers: int = 1) -> GradientProfile:
    """Per-theta Monte-Carlo mean/variance of the gradient estimator.

    Episode indices are shared across grid points (common random numbers),
    which keeps the profile shape smooth in theta.
    """
    if n_per_point < 2:
        raise ValueError("need at least two episodes per grid point")
    thetas = np.asarray(theta_grid, dtype=float)
    tasks = [(config, xi, t, n_per_point, episode_offset) for t in thetas]
    rows = parallel_map(_profile_point, tasks, workers)
    out = np.asarray(rows)
    return GradientProfile(thetas, out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4],
                           n_per_point)


def objective_from_gradients(thetas: Sequence[float], grad_means: Sequence[float],
                             kappa: float,
                             mc_anchor: Optional[float] = None):
    """Objective curve by trapezoidal integration of the gradient profile.

    Anchored at kappa at the first grid point; when an independent
    Monte-Carlo estimate at the first grid point is supplied, a second
    curve anchored there is returned as well.
    """
    thetas = np.asarray(thetas, dtype=float)
    grads = np.asarray(grad_means, dtype=float)
    if np.any(np.diff(thetas) <= 0):
        raise ValueError("theta grid must be strictly increasing")
    integral = cumulative_trapezoid(grads, thetas, initial=0.0)
    j_kappa = kappa + integral
    j_mc = mc_anchor + integral if mc_anchor is not None else None
    return j_kappa, j_mc
