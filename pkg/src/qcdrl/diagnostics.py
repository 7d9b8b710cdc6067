"""Statistical post-processing: batch-means covariance across training
replicas, stability ratios across run lengths, and histogram exports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .qlearn import QLearnSettings, QTrainResult, extract_policy, train
from .simulate import ExperimentConfig, parallel_map


@dataclass(frozen=True)
class ReplicaResult:
    theta_pr: np.ndarray
    xi: int
    h_theta: float
    is_threshold: bool
    resets: int

    def __post_init__(self):
        if self.xi < 1:
            raise ValueError("replica sample count must be positive")


def batch_means_covariance(replicas: Sequence[ReplicaResult]) -> np.ndarray:
    """Empirical covariance of sqrt(xi)-scaled deviations across replicas."""
    if len(replicas) < 2:
        raise ValueError(f"need at least 2 replicas, got {len(replicas)}")
    thetas = np.stack([r.theta_pr for r in replicas])
    xis = np.array([r.xi for r in replicas], dtype=float)
    center = thetas.mean(axis=0)
    z = np.sqrt(xis)[:, None] * (thetas - center)
    return np.cov(z, rowvar=False, ddof=1)


def covariance_stability_report(cov_by_n: dict) -> list[tuple]:
    """Pairwise ratios of matched diagonal entries across run lengths.

    Returns rows (n_a, n_b, coordinate, ratio, flagged) where flagged marks
    ratios outside [0.5, 2].
    """
    if len(cov_by_n) < 2:
        raise ValueError("need covariance estimates for at least 2 run lengths")
    ns = sorted(cov_by_n)
    for n in ns:
        if cov_by_n[n] is None:
            raise ValueError(f"missing covariance entry for N={n}")
    rows = []
    for i, na in enumerate(ns):
        for nb in ns[i + 1:]:
            da = np.diag(np.atleast_2d(cov_by_n[na]))
            db = np.diag(np.atleast_2d(cov_by_n[nb]))
            if da.shape != db.shape:
                raise ValueError(f"covariance dimensions differ between N={na} and N={nb}")
            for j, (a, b) in enumerate(zip(da, db)):
                ratio = float(a / b) if b != 0 else math.inf
                rows.append((na, nb, j, ratio, not 0.5 <= ratio <= 2.0))
    return rows


def histogram_export(samples: Sequence[float], bins: Optional[int] = None) -> list[tuple[float, int]]:
    """Equal-width histogram rows (bin left edge, count); Sturges by default."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 1:
        raise ValueError("need at least one sample")
    if bins is None:
        bins = int(math.ceil(math.log2(arr.size))) + 1 if arr.size > 1 else 1
    counts, edges = np.histogram(arr, bins=bins)
    return list(zip(edges[:-1].tolist(), counts.tolist()))


def _replica_worker(args) -> ReplicaResult:
    config, basis, settings, n_episodes, replica_index, x_max = args
    offset = replica_index * 1_000_000_000
    res = train(config, basis, settings, n_episodes, episode_offset=offset)
    pol = extract_policy(basis, res.theta_pr, x_max=x_max)
    return ReplicaResult(res.theta_pr, res.xi_total, pol.h_theta, pol.is_threshold,
                         res.resets)


def collect_replicas(config: ExperimentConfig, basis, settings: QLearnSettings,
                     n_episodes: int, n_replicas: int, x_max: float,
                     workers: int = 1) -> list[ReplicaResult]:
    """Independent trainings; replica i uses its own episode-index block."""
    tasks = [
        (config, basis, settings, n_episodes, i, x_max) for i in range(n_replicas)
    ]
    return parallel_map(_replica_worker, tasks, workers)
