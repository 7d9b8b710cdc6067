"""Configuration-driven experiment runner: every pipeline is a subcommand
writing the CSV/JSON artifacts the plotting layer consumes."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import actor_critic as ac
from . import diagnostics, models, qlearn
from .config import (
    ConfigError,
    RunConfig,
    build_experiment,
    config_digest,
    load_config,
    paper_scale,
)
from .detectors import Cusum, ShiryaevPosterior
from .models import ModelError
from .simulate import (
    evaluate_threshold,
    optimal_threshold,
    per_repeat_optima,
    shifted_curves,
    sweep_thresholds,
)

ANCHOR_KAPPA = 100.0


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")


class ManifestWriter:
    """Collects output paths and run statistics for the manifest record."""

    def __init__(self, out_dir: Path, subcommand: str, cfg: RunConfig):
        self.out_dir = out_dir
        self.subcommand = subcommand
        self.cfg = cfg
        self.outputs: list[str] = []
        self.stats = {"cap_hit_fraction": 0.0, "reset_count": 0}
        self.t0 = time.monotonic()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def finish(self) -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "seed": self.cfg.seed,
            "config_sha256": config_digest(self.cfg),
            "outputs": sorted(self.outputs),
            "wall_clock_s": round(time.monotonic() - self.t0, 3),
            **self.stats,
        }
        path = self.out_dir / f"manifest_{self.subcommand.replace('-', '_')}.json"
        write_json(path, manifest)
        return path


def _case_quantities(cfg: RunConfig):
    truth, score = models.make_case(cfg.case, cfg.model.mu1, cfg.model.sigma)
    rho_a = models.tail_rate(cfg.model.change.law()).rho_a
    ups = models.solve_upsilon_plus(models.lambda0_for(score, truth[0]), rho_a)
    return score, ups


def cmd_approx(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "approx", cfg)
    score, ups = _case_quantities(cfg)
    grid = np.geomspace(2.0, 100.0, 25)
    rows = [
        (k, models.approx_threshold(k, ups), models.approx_cost(k, ups, score.m1), ups, score.m1)
        for k in grid
    ]
    write_csv(man.path("approx.csv"),
              ["kappa", "threshold_approx", "cost_approx", "ups_plus", "m1"], rows)
    man.finish()


def _cusum_sweep(cfg: RunConfig, workers: int):
    exp = build_experiment(cfg, detector=Cusum())
    grid = np.linspace(0.0, cfg.sweep.cusum_h_max, cfg.sweep.n_thresholds)
    table = sweep_thresholds(grid, exp, cfg.sweep.n_paths, cfg.sweep.n_repeats,
                             workers=workers)
    return exp, table


def cmd_sweep(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "sweep", cfg)
    score, ups = _case_quantities(cfg)
    exp, table = _cusum_sweep(cfg, workers)
    man.stats["cap_hit_fraction"] = table.cap_fraction
    write_csv(man.path("sweep.csv"), ["h", "MDE", "MDD", "SE_MDE", "SE_MDD"], table.rows())

    kappas = sorted(set(cfg.kappas) | {ANCHOR_KAPPA})
    optima = {k: optimal_threshold(table, k) for k in kappas}
    rows = []
    for k in kappas:
        hs, _ = per_repeat_optima(table, k)
        se_h = float(hs.std(ddof=1) / math.sqrt(len(hs))) if len(hs) > 1 else 0.0
        rows.append((k, optima[k].h_star, se_h, optima[k].j_star, optima[k].se_j))
    write_csv(man.path("optima.csv"),
              ["kappa", "h_star", "se_h", "j_star", "se_j"], rows)
    anchor = optima[ANCHOR_KAPPA]
    curves = shifted_curves(ups, score.m1, (anchor.h_star, anchor.j_star), ANCHOR_KAPPA)
    dense = np.geomspace(2.0, 100.0, 25)
    write_csv(
        man.path("shifted.csv"),
        ["kappa", "threshold_shifted", "cost_shifted"],
        [(k, curves.threshold(k), curves.cost(k)) for k in dense],
    )
    write_json(man.path("anchors.json"), {
        "anchor_kappa": ANCHOR_KAPPA,
        "h_star_100": anchor.h_star,
        "j_star_100": anchor.j_star,
        "ups_plus": ups,
        "m1": score.m1,
    })
    man.finish()


def cmd_train_ac(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "train-ac", cfg)
    exp = build_experiment(cfg, detector=Cusum())
    res = ac.train_threshold_policy(
        exp, xi=cfg.actor_critic.xi, n_iterations=cfg.actor_critic.n_iterations,
        theta0=cfg.actor_critic.theta0, rho_step=cfg.actor_critic.rho_step,
        use_ngd=cfg.actor_critic.gain == "ngd",
    )
    write_csv(
        man.path("ac_trace.csv"),
        ["n", "theta", "theta_pr"],
        [(n + 1, res.thetas[n], res.theta_pr[n]) for n in range(len(res.thetas))],
    )
    write_json(man.path("ac_train.json"), {
        "alpha0": res.alpha0, "rejected": res.rejected,
        "theta_final": res.thetas[-1], "theta_pr_final": res.theta_pr[-1],
    })
    man.finish()


def cmd_profile_ac(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "profile-ac", cfg)
    exp = build_experiment(cfg, detector=Cusum())
    a = cfg.actor_critic
    grid = np.linspace(a.theta_start, a.theta_stop, a.theta_num)
    prof = ac.gradient_profile(exp, a.xi, grid, a.n_episodes, workers=workers)
    write_csv(
        man.path("ac_profile.csv"),
        ["theta", "grad_mean", "grad_var", "grad_se", "j_mean", "j_se"],
        zip(prof.thetas, prof.grad_mean, prof.grad_var, prof.grad_se, prof.j_mean, prof.j_se),
    )
    j_kappa, j_mc = ac.objective_from_gradients(prof.thetas, prof.grad_mean, cfg.kappa,
                                                mc_anchor=float(prof.j_mean[0]))
    write_csv(
        man.path("ac_objective.csv"),
        ["theta", "j_integrated_kappa_anchor", "j_integrated_mc_anchor", "j_mc", "j_mc_se"],
        zip(prof.thetas, j_kappa, j_mc, prof.j_mean, prof.j_se),
    )
    man.finish()


def _qlearn_pieces(cfg: RunConfig):
    exp = build_experiment(cfg, detector=Cusum())
    q = cfg.qlearn
    _, ups = _case_quantities(cfg)
    schedule = qlearn.ExplorationSchedule(q.eps0, q.resolved_eps_f(), q.n0, q.eta, q.delta)
    if q.basis == "smooth":
        b_q = q.b_q if q.b_q is not None else qlearn.default_b_q(exp, ups)
        basis = qlearn.SmoothBasis(b_q)
    elif q.basis == "binned":
        basis = qlearn.BinnedBasis(tuple(q.bin_edges))
    else:
        raise ConfigError(f"unknown basis {q.basis!r}")
    settings = qlearn.QLearnSettings(
        gain=q.gain, schedule=schedule, alpha_exponent=q.alpha_exponent,
        beta_exponent=q.beta_exponent, k0=q.k0, reset_bound=q.reset_bound,
        init_range=q.init_range,
    )
    x_max = 2.0 * (models.approx_threshold(max(cfg.kappa, math.e), ups) + q.eta + q.delta)
    return exp, basis, settings, ups, x_max


def cmd_train_q(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "train-q", cfg)
    exp, basis, settings, ups, x_max = _qlearn_pieces(cfg)
    q = cfg.qlearn
    res = qlearn.train(exp, basis, settings, q.n_episodes, ups_plus=ups)
    man.stats["reset_count"] = res.resets
    man.stats["cap_hit_fraction"] = res.cap_hits / q.n_episodes
    d = basis.d
    write_csv(
        man.path("q_trace.csv"),
        ["episode"] + [f"theta_{i+1}" for i in range(d)] + [f"pr_{i+1}" for i in range(d)],
        [
            (n + 1, *res.theta_trace[n], *res.pr_trace[n])
            for n in range(q.n_episodes)
        ],
    )
    pol = qlearn.extract_policy(basis, res.theta_pr, x_max=x_max)
    jac = qlearn.mean_flow_jacobian(
        exp, basis, res.theta_pr, n_steps=q.jacobian_steps, delta_fd=q.jacobian_delta,
        eps=settings.schedule.eps_f, schedule=settings.schedule, ups_plus=ups,
    )
    write_json(man.path("policy.json"), {
        "theta": res.theta_pr,
        "h_theta": pol.h_theta,
        "is_threshold": pol.is_threshold,
        "crossings": pol.crossings,
        "eigenvalues_re": jac.eigenvalues.real,
        "eigenvalues_im": jac.eigenvalues.imag,
        "rhp_flag": jac.rhp_flag,
        "basis": q.basis,
        "b_q": getattr(basis, "b_q", None),
        "bin_edges": list(getattr(basis, "edges", ())),
        "resets": res.resets,
        "xi_total": res.xi_total,
    })
    xs = np.linspace(0.0, x_max, 256)
    write_csv(
        man.path("q_curves.csv"),
        ["x", "q_continue", "q_stop"],
        [(x, *basis.q_pair(res.theta_pr, x)) for x in xs],
    )
    man.finish()


def cmd_eval_policy(cfg: RunConfig, out: Path, workers: int, policy_path: str) -> None:
    man = ManifestWriter(out, "eval-policy", cfg)
    policy_file = Path(policy_path) if policy_path else out / "policy.json"
    if not policy_file.exists():
        raise ConfigError(f"policy file {policy_file} not found; run train-q first")
    record = json.loads(policy_file.read_text(encoding="utf-8"))
    h_policy = float(record["h_theta"])
    if not math.isfinite(h_policy):
        raise ConfigError("extracted policy never stops; nothing to evaluate")

    exp, table = _cusum_sweep(cfg, workers)
    opt = optimal_threshold(table, cfg.kappa)

    change = cfg.model.change
    rho = change.rho if change.kind == "geometric" else change.rho_slow
    shir = build_experiment(cfg, detector=ShiryaevPosterior(rho))
    sgrid = np.linspace(0.0, 1.0, cfg.sweep.n_thresholds)
    stable = sweep_thresholds(sgrid, shir, cfg.sweep.n_paths, cfg.sweep.n_repeats,
                              workers=workers)
    sopt = optimal_threshold(stable, cfg.kappa)

    ev = evaluate_threshold(h_policy, exp, cfg.eval_n_paths * cfg.eval_n_repeats,
                            episode_offset=10**9)
    rows = [
        (cfg.kappa, "qlearned", h_policy, ev.cost, ev.se_cost, ev.mde, ev.mdd, ev.p_fa),
        (cfg.kappa, "cusum_star", opt.h_star, opt.j_star, opt.se_j, "", "", ""),
        (cfg.kappa, "shiryaev_star", sopt.h_star, sopt.j_star, sopt.se_j, "", "", ""),
    ]
    write_csv(man.path("comparison.csv"),
              ["kappa", "label", "h", "cost", "se_cost", "mde", "mdd", "p_fa"], rows)
    man.finish()


def cmd_diagnose(cfg: RunConfig, out: Path, workers: int) -> None:
    man = ManifestWriter(out, "diagnose", cfg)
    exp, basis, settings, ups, x_max = _qlearn_pieces(cfg)
    d = basis.d
    cov_by_n = {}
    var_h = {}
    var_theta4 = {}
    resets_total = 0
    for n_episodes in cfg.diagnose.episode_counts:
        reps = diagnostics.collect_replicas(exp, basis, settings, n_episodes,
                                            cfg.diagnose.n_replicas, x_max, workers=workers)
        resets_total += sum(r.resets for r in reps)
        cov = diagnostics.batch_means_covariance(reps)
        cov_by_n[n_episodes] = cov
        write_csv(man.path(f"cov_N{n_episodes}.csv"),
                  [f"c{j+1}" for j in range(d)], [tuple(row) for row in cov])
        write_csv(
            man.path(f"replicas_N{n_episodes}.csv"),
            ["replica", "xi", "h_theta", "is_threshold"] + [f"theta_{i+1}" for i in range(d)],
            [(i, r.xi, r.h_theta, r.is_threshold, *r.theta_pr) for i, r in enumerate(reps)],
        )
        zs = np.stack([np.sqrt(r.xi) * (r.theta_pr - np.mean([q.theta_pr for q in reps], axis=0))
                       for r in reps])
        write_csv(man.path(f"hist_z4_N{n_episodes}.csv"), ["left_edge", "count"],
                  diagnostics.histogram_export(zs[:, min(3, d - 1)]))
        hs = np.array([r.h_theta for r in reps if math.isfinite(r.h_theta)])
        th4 = np.array([r.theta_pr[min(3, d - 1)] for r in reps])
        if hs.size:
            write_csv(man.path(f"hist_h_N{n_episodes}.csv"), ["left_edge", "count"],
                      diagnostics.histogram_export(hs))
        write_csv(man.path(f"hist_theta4_N{n_episodes}.csv"), ["left_edge", "count"],
                  diagnostics.histogram_export(th4))
        var_h[n_episodes] = float(np.var(hs, ddof=1)) if len(hs) > 1 else None
        var_theta4[n_episodes] = float(np.var(th4, ddof=1))
    man.stats["reset_count"] = resets_total
    report = diagnostics.covariance_stability_report(cov_by_n)
    write_csv(man.path("stability.csv"),
              ["n_a", "n_b", "coordinate", "ratio", "flagged"], report)
    write_json(man.path("diagnose_summary.json"), {
        "n_replicas": cfg.diagnose.n_replicas,
        "episode_counts": list(cfg.diagnose.episode_counts),
        "var_h": {str(k): v for k, v in var_h.items()},
        "var_theta4": {str(k): v for k, v in var_theta4.items()},
    })
    man.finish()


COMMANDS = {
    "approx": cmd_approx,
    "sweep": cmd_sweep,
    "train-ac": cmd_train_ac,
    "profile-ac": cmd_profile_ac,
    "train-q": cmd_train_q,
    "eval-policy": cmd_eval_policy,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcdrl",
        description="Bayesian quickest-change-detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--paper-scale", action="store_true",
                       help="publication-scale evaluation protocol")
        if name == "eval-policy":
            p.add_argument("--policy", default=None,
                           help="policy JSON from train-q (default: <out>/policy.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.paper_scale:
            cfg = paper_scale(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "eval-policy":
            cmd_eval_policy(cfg, out, args.workers, args.policy)
        else:
            COMMANDS[args.command](cfg, out, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
