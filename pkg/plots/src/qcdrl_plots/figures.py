"""Figure analogs rendered from the experiment CSV/JSON artifacts.

Every renderer is a pure function of its input files: fixed style, fixed
DPI, no timestamps, so rasterized output is reproducible byte for byte
within one matplotlib version.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 110

FIGURE_IDS = ("fig1", "fig2", "fig4", "fig5", "fig6", "fig7", "fig8")


class SchemaError(Exception):
    """Input file missing or not matching the expected schema."""


@dataclass(frozen=True)
class FigureSpec:
    figure: str
    inputs: dict
    output: str

    def __post_init__(self):
        if self.figure not in FIGURE_IDS:
            raise SchemaError(f"unknown figure id {self.figure!r}; expected one of {FIGURE_IDS}")


@dataclass(frozen=True)
class Table:
    columns: dict

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def read_table(path, required: tuple) -> Table:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input file {path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty (no header row)") from None
        for col in required:
            if col not in header:
                raise SchemaError(f"{path} is missing required column {col!r}")
        rows = list(reader)
    columns = {}
    for j, name in enumerate(header):
        vals = []
        for row in rows:
            cell = row[j] if j < len(row) else ""
            try:
                vals.append(float(cell))
            except ValueError:
                vals.append(math.nan)
        columns[name] = np.asarray(vals)
    return Table(columns)


def _style():
    plt.rcParams.update({
        "figure.dpi": DPI,
        "savefig.dpi": DPI,
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "lines.linewidth": 1.4,
    })


def _band(ax, x, y, se, color, label):
    ax.plot(x, y, color=color, marker="o", markersize=3, label=label)
    ax.fill_between(x, y - se, y + se, color=color, alpha=0.25, linewidth=0)


def render_fig1(inputs: dict) -> plt.Figure:
    """Threshold and cost versus kappa: approximations, shifted curves,
    Monte-Carlo optima with 1-sigma bands."""
    approx = read_table(inputs["approx"], ("kappa", "threshold_approx", "cost_approx"))
    shifted = read_table(inputs["shifted"], ("kappa", "threshold_shifted", "cost_shifted"))
    optima = read_table(inputs["optima"], ("kappa", "h_star", "se_h", "j_star", "se_j"))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    for ax, acol, scol, ocol, secol, title in (
        (ax1, "threshold_approx", "threshold_shifted", "h_star", "se_h", "optimal threshold"),
        (ax2, "cost_approx", "cost_shifted", "j_star", "se_j", "optimal cost"),
    ):
        if approx.n_rows:
            ax.plot(approx["kappa"], approx[acol], "--", color="gray", label="asymptotic")
        if shifted.n_rows:
            ax.plot(shifted["kappa"], shifted[scol], color="tab:orange", label="shifted")
        if optima.n_rows:
            _band(ax, optima["kappa"], optima[ocol], optima[secol], "tab:blue", "Monte-Carlo")
        ax.set_xscale("log")
        ax.set_xlabel(r"$\kappa$")
        ax.set_title(title)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def render_fig2(inputs: dict) -> plt.Figure:
    """Gradient-statistics profile: variance, mean gradient, objectives."""
    prof = read_table(inputs["profile"], ("theta", "grad_mean", "grad_var", "grad_se"))
    obj = read_table(
        inputs["objective"],
        ("theta", "j_integrated_kappa_anchor", "j_integrated_mc_anchor", "j_mc", "j_mc_se"),
    )
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(10.0, 3.0))
    if prof.n_rows:
        ax1.semilogy(prof["theta"], prof["grad_var"], color="tab:red", marker="o", markersize=3)
        _band(ax2, prof["theta"], prof["grad_mean"], prof["grad_se"], "tab:blue", "gradient")
        ax2.axhline(0.0, color="k", linewidth=0.8)
    ax1.set_title("gradient sample variance")
    ax2.set_title("gradient estimate")
    if obj.n_rows:
        _band(ax3, obj["theta"], obj["j_mc"], obj["j_mc_se"], "tab:blue", "Monte-Carlo")
        ax3.plot(obj["theta"], obj["j_integrated_mc_anchor"], color="tab:orange",
                 label="integrated (MC anchor)")
        ax3.plot(obj["theta"], obj["j_integrated_kappa_anchor"], "--", color="gray",
                 label="integrated (kappa anchor)")
        ax3.legend(fontsize=7)
    ax3.set_title("objective")
    for ax in (ax1, ax2, ax3):
        ax.set_xlabel(r"$\theta$")
    fig.tight_layout()
    return fig


def render_fig4(inputs: dict) -> plt.Figure:
    """Parameter trajectories over training episodes."""
    trace = read_table(inputs["trace"], ("episode",))
    theta_cols = sorted(c for c in trace.columns if c.startswith("theta_"))
    if not theta_cols:
        raise SchemaError(f"{inputs['trace']} is missing required column 'theta_*'")
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    if trace.n_rows:
        for c in theta_cols:
            ax.plot(trace["episode"], trace[c], label=c, linewidth=0.9)
        ax.legend(fontsize=7, ncol=2)
    ax.set_xlabel("episode")
    ax.set_ylabel(r"$\theta$")
    ax.set_title("Q-learning parameter estimates")
    fig.tight_layout()
    return fig


def render_fig5(inputs: dict) -> plt.Figure:
    """Learned state-input value curves and the greedy crossing."""
    curves = read_table(inputs["curves"], ("x", "q_continue", "q_stop"))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if curves.n_rows:
        ax.plot(curves["x"], curves["q_continue"], label="Q(x, continue)")
        ax.plot(curves["x"], curves["q_stop"], label="Q(x, stop)")
    policy_path = inputs.get("policy")
    if policy_path:
        record = json.loads(Path(policy_path).read_text(encoding="utf-8"))
        if "h_theta" not in record:
            raise SchemaError(f"{policy_path} is missing required column 'h_theta'")
        h = float(record["h_theta"])
        if math.isfinite(h):
            ax.axvline(h, color="k", linestyle="--", linewidth=0.9,
                       label=f"threshold {h:.2f}")
    ax.set_xlabel("x")
    ax.legend(fontsize=7)
    ax.set_title("Q-function crossing")
    fig.tight_layout()
    return fig


def _hist_panel(ax, table, title):
    if table.n_rows:
        edges = table["left_edge"]
        counts = table["count"]
        width = (edges[1] - edges[0]) if len(edges) > 1 else 1.0
        ax.bar(edges, counts, width=width, align="edge", color="tab:blue", edgecolor="white")
    ax.set_title(title, fontsize=8)


def render_fig6(inputs: dict) -> plt.Figure:
    """Histograms of scaled parameter deviations for several run lengths."""
    files = inputs["histograms"]
    if isinstance(files, (str, Path)):
        files = [files]
    if not files:
        raise SchemaError("fig6 needs at least one histogram file")
    fig, axes = plt.subplots(1, len(files), figsize=(3.2 * len(files), 3.0), squeeze=False)
    for ax, f in zip(axes[0], files):
        table = read_table(f, ("left_edge", "count"))
        _hist_panel(ax, table, Path(f).stem)
    fig.tight_layout()
    return fig


def render_fig7(inputs: dict) -> plt.Figure:
    """Threshold-estimate and parameter-coordinate histograms side by side."""
    h_tab = read_table(inputs["hist_h"], ("left_edge", "count"))
    t_tab = read_table(inputs["hist_theta4"], ("left_edge", "count"))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.4, 3.0))
    _hist_panel(ax1, h_tab, "extracted thresholds")
    _hist_panel(ax2, t_tab, "theta(4)")
    fig.tight_layout()
    return fig


def render_fig8(inputs: dict) -> plt.Figure:
    """Average-cost comparison of the learned policy against the benchmarks."""
    comp = read_table(inputs["comparison"], ("kappa", "label", "cost", "se_cost"))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if comp.n_rows:
        with Path(inputs["comparison"]).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        labels = [r["label"] for r in rows]
        costs = [float(r["cost"]) for r in rows]
        ses = [float(r["se_cost"]) for r in rows]
        xs = np.arange(len(rows))
        ax.bar(xs, costs, yerr=ses, capsize=4,
               color=["tab:blue", "tab:orange", "tab:green"][: len(rows)])
        ax.set_xticks(xs)
        ax.set_xticklabels([f"{l}\n(k={float(r['kappa']):g})" for l, r in zip(labels, rows)],
                           fontsize=7)
    ax.set_ylabel("eager cost")
    ax.set_title("average cost comparison")
    fig.tight_layout()
    return fig


RENDERERS = {
    "fig1": render_fig1,
    "fig2": render_fig2,
    "fig4": render_fig4,
    "fig5": render_fig5,
    "fig6": render_fig6,
    "fig7": render_fig7,
    "fig8": render_fig8,
}


def render(spec: FigureSpec, base_dir: Path | None = None) -> plt.Figure:
    """Build the figure for a spec; inputs resolve relative to base_dir."""
    _style()
    base = Path(base_dir) if base_dir else Path(".")

    def resolve(v):
        if isinstance(v, (list, tuple)):
            return [str(base / x) for x in v]
        return str(base / v)

    inputs = {k: resolve(v) for k, v in spec.inputs.items()}
    return RENDERERS[spec.figure](inputs)


def save(fig: plt.Figure, output: Path) -> Path:
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, format="png")
    plt.close(fig)
    return output


def figure_checksum(fig: plt.Figure) -> str:
    """SHA-256 of the rasterized RGBA buffer at the fixed DPI."""
    fig.canvas.draw()
    buf = np.asarray(fig.canvas.buffer_rgba())
    return hashlib.sha256(buf.tobytes()).hexdigest()


def default_specs(in_dir: Path) -> list[FigureSpec]:
    """Specs for the standard artifact layout produced by the experiment CLI."""
    in_dir = Path(in_dir)
    hist_files = sorted(p.name for p in in_dir.glob("hist_z4_N*.csv"))
    hist_h = sorted(p.name for p in in_dir.glob("hist_h_N*.csv"))
    hist_t4 = sorted(p.name for p in in_dir.glob("hist_theta4_N*.csv"))
    specs = [
        FigureSpec("fig1", {"approx": "approx.csv", "shifted": "shifted.csv",
                            "optima": "optima.csv"}, "fig1.png"),
        FigureSpec("fig2", {"profile": "ac_profile.csv", "objective": "ac_objective.csv"},
                   "fig2.png"),
        FigureSpec("fig4", {"trace": "q_trace.csv"}, "fig4.png"),
        FigureSpec("fig5", {"curves": "q_curves.csv", "policy": "policy.json"}, "fig5.png"),
    ]
    if hist_files:
        specs.append(FigureSpec("fig6", {"histograms": hist_files}, "fig6.png"))
    if hist_h and hist_t4:
        specs.append(FigureSpec("fig7", {"hist_h": hist_h[-1], "hist_theta4": hist_t4[-1]},
                                "fig7.png"))
    specs.append(FigureSpec("fig8", {"comparison": "comparison.csv"}, "fig8.png"))
    return specs
