"""SVG charts for a pipeline report: the per-layer fairness-efficiency ratio
and the preference / perplexity sweep over lambda."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

_RC = {"svg.fonttype": "none", "svg.hashsalt": "farelab", "font.size": 9}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_layer_ratios(layer_scores, selected, path) -> Path:
    layers = [s["layer"] for s in layer_scores]
    ratios = [s["ratio"] for s in layer_scores]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        colors = ["tab:red" if l in selected else "tab:gray" for l in layers]
        ax.bar(range(len(layers)), ratios, color=colors)
        ax.set_xticks(range(len(layers)))
        ax.set_xticklabels([str(l) for l in layers])
        ax.set_xlabel("layer")
        ax.set_ylabel("R(l)")
        ax.set_title("layer sensitivity (selected in red)")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_lambda_sweep(pareto: dict, path) -> Path:
    grid = pareto["grid"]
    lams = [g["lambda"] for g in grid]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(lams, [g["preference"] for g in grid], "o-", color="tab:blue", label="preference")
        ax.axhline(0.5, color="tab:blue", lw=0.5, ls=":")
        ax.set_xlabel("lambda")
        ax.set_ylabel("preference")
        ax.set_xticks(lams)
        ax.set_xticklabels([f"{x:g}" for x in lams], rotation=90)
        ax2 = ax.twinx()
        ax2.plot(lams, [g["ppl_ratio"] for g in grid], "s--", color="tab:orange", label="PPL ratio")
        ax2.axhline(1 + pareto["beta"], color="tab:orange", lw=0.5, ls=":")
        ax2.set_ylabel("PPL / PPL_base")
        ax.axvline(pareto["lambda_star"], color="black", lw=0.8)
        ax.set_title(f"lambda* = {pareto['lambda_star']:g}")
        fig.tight_layout()
        return _save(fig, Path(path))


def render_plots(report: dict, out_dir) -> list[Path]:
    """Write whichever charts ``report`` has data for; missing data is logged
    and the chart skipped."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    scores = report.get("layer_scores")
    if scores:
        written.append(plot_layer_ratios(scores, set(report.get("selected_layers", [])),
                                         out_dir / "layer_ratios.svg"))
    else:
        log.warning("report has no layer scores; skipping the R(l) chart")
    pareto = report.get("pareto")
    if pareto and pareto.get("grid"):
        written.append(plot_lambda_sweep(pareto, out_dir / "lambda_sweep.svg"))
    else:
        log.warning("report has no lambda grid; skipping the lambda sweep chart")
    return written
