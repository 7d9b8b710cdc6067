"""Run configuration: dataclass defaults for every experiment constant,
YAML loading with strict key checking, and assembly into experiment
objects."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from . import models
from .detectors import Cusum, DetectorKind, ShiryaevPosterior, ShiryaevRoberts
from .models import ChangeTimeLaw, Geometric, GeometricMixture
from .simulate import ExperimentConfig, ObservationModel, default_horizon_cap


class ConfigError(Exception):
    """Invalid or malformed run configuration."""


@dataclass(frozen=True)
class ChangeConfig:
    kind: str = "geometric"  # geometric | mixture
    rho: float = 0.02
    p: float = 0.05
    rho_slow: float = 0.02
    rho_fast: float = 0.2

    def law(self) -> ChangeTimeLaw:
        if self.kind == "geometric":
            return Geometric(self.rho)
        if self.kind == "mixture":
            return GeometricMixture(self.p, self.rho_slow, self.rho_fast)
        raise ConfigError(f"unknown change-time kind {self.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    mu1: float = 0.5
    sigma: float = 1.0
    change: ChangeConfig = field(default_factory=ChangeConfig)


@dataclass(frozen=True)
class SweepConfig:
    n_paths: int = 2000
    n_repeats: int = 20
    n_thresholds: int = 200
    cusum_h_max: float = 20.0


@dataclass(frozen=True)
class ACConfig:
    xi: float = 20.0
    n_episodes: int = 10_000  # per profile grid point
    n_iterations: int = 2000
    rho_step: float = 0.7
    gain: str = "ngd"  # ngd | none
    theta0: float = 1.0
    theta_start: float = 0.5
    theta_stop: float = 9.0
    theta_num: int = 18
    fd_delta: float = 0.25


@dataclass(frozen=True)
class QConfig:
    basis: str = "smooth"  # smooth | binned
    b_q: Optional[float] = None  # default: asymptotic threshold + eta
    bin_edges: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0)
    gain: str = "zap"  # zap | scalar
    eps0: float = 1.0
    eps_f: Optional[float] = None  # default 0.1 for zap, 1e-4 for scalar
    n0: int = 1000
    eta: float = 2.0
    delta: float = 3.0
    n_episodes: int = 10_000
    alpha_exponent: Optional[float] = None  # default 1.0 for zap, 0.8 for scalar
    beta_exponent: float = 0.85
    k0: int = 100
    reset_bound: float = 5e3
    init_range: float = 100.0
    jacobian_steps: int = 20_000
    jacobian_delta: float = 0.5

    def resolved_eps_f(self) -> float:
        if self.eps_f is not None:
            return self.eps_f
        return 0.1 if self.gain == "zap" else 1e-4


@dataclass(frozen=True)
class DiagnoseConfig:
    n_replicas: int = 50
    episode_counts: tuple = (10_000, 30_000)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    case: str = "case1"
    detector: str = "cusum"  # cusum | sr | posterior
    kappa: float = 27.0
    kappas: tuple = (2.0, 5.0, 10.0, 20.0, 27.0, 30.0, 50.0, 100.0)
    horizon_cap: Optional[int] = None
    seed: int = 99
    eval_n_paths: int = 2000
    eval_n_repeats: int = 20
    sweep: SweepConfig = field(default_factory=SweepConfig)
    actor_critic: ACConfig = field(default_factory=ACConfig)
    qlearn: QConfig = field(default_factory=QConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)


_PAPER_SCALE = dict(n_paths=20_000, n_repeats=200, n_thresholds=1000)


def paper_scale(cfg: RunConfig) -> RunConfig:
    """Evaluation protocol at publication scale; training runs 10x longer."""
    sweep = dataclasses.replace(cfg.sweep, **_PAPER_SCALE)
    ac = dataclasses.replace(cfg.actor_critic, n_iterations=cfg.actor_critic.n_iterations * 10)
    ql = dataclasses.replace(cfg.qlearn, n_episodes=cfg.qlearn.n_episodes * 10)
    return dataclasses.replace(cfg, sweep=sweep, actor_critic=ac, qlearn=ql,
                               eval_n_paths=20_000, eval_n_repeats=200)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or cls.__name__} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in section {path or 'top level'}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        nested = {
            "model": ModelConfig, "change": ChangeConfig, "sweep": SweepConfig,
            "actor_critic": ACConfig, "qlearn": QConfig, "diagnose": DiagnoseConfig,
        }
        if name in nested:
            kwargs[name] = _build(nested[name], value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values in section {path or 'top level'}: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    """RunConfig from a YAML file; every key optional, unknown keys rejected."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return RunConfig()
    return _build(RunConfig, data, "")


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def detector_kind(cfg: RunConfig) -> DetectorKind:
    if cfg.detector == "cusum":
        return Cusum()
    if cfg.detector == "sr":
        return ShiryaevRoberts()
    if cfg.detector == "posterior":
        change = cfg.model.change
        rho = change.rho if change.kind == "geometric" else change.rho_slow
        return ShiryaevPosterior(rho)
    raise ConfigError(f"unknown detector {cfg.detector!r}")


def build_experiment(cfg: RunConfig, kappa: Optional[float] = None,
                     detector: Optional[DetectorKind] = None,
                     seed: Optional[int] = None) -> ExperimentConfig:
    """ExperimentConfig for the configured case, detector, and change law."""
    truth, score = models.make_case(cfg.case, cfg.model.mu1, cfg.model.sigma)
    law = cfg.model.change.law()
    cap = cfg.horizon_cap if cfg.horizon_cap is not None else default_horizon_cap(law)
    try:
        return ExperimentConfig(
            model=ObservationModel(truth[0], truth[1], law),
            detector=detector if detector is not None else detector_kind(cfg),
            score=score,
            kappa=cfg.kappa if kappa is None else kappa,
            horizon_cap=cap,
            seed=cfg.seed if seed is None else seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
