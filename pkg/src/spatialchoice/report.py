"""Figure rendering for report outputs.

Every interpretation and training report the CLI writes as delimited text
can also be rendered as a simple matplotlib figure saved next to the CSV.
Map/choropleth drawing stays out of scope; these are line and bar charts
keyed by alternative index and hop distance.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .interpret import ElasticityReport, ICECurve, SubstitutionMap

_DPI = 150


def save_ice_figure(curve: ICECurve, path) -> None:
    """One line per household, colored by the household's color key."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    key = curve.color_key
    span = key.max() - key.min()
    normed = (key - key.min()) / span if span > 0 else np.full_like(key, 0.5)
    cmap = plt.get_cmap("viridis")
    for row, t in zip(curve.curves, normed):
        ax.plot(curve.grid, row, color=cmap(t), alpha=0.55, linewidth=0.9)
    sm = plt.cm.ScalarMappable(
        cmap=cmap, norm=plt.Normalize(vmin=key.min(), vmax=key.max() if span > 0 else key.min() + 1)
    )
    fig.colorbar(sm, ax=ax, label="household color key")
    ax.set_xlabel(f"{curve.attribute} (original units)")
    ax.set_ylabel(f"P(alternative {curve.alternative})")
    ax.set_title(f"Conditional expectation curves, alternative {curve.alternative}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_submap_figure(submap: SubstitutionMap, path) -> None:
    """Percent probability change per alternative, colored by hop distance."""
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    hops = submap.hop_distance
    finite = hops[hops >= 0]
    max_hop = int(finite.max()) if finite.size else 0
    cmap = plt.get_cmap("plasma")
    colors = [
        cmap(0.15 + 0.7 * (h / max(max_hop, 1))) if h >= 0 else (0.6, 0.6, 0.6, 1.0)
        for h in hops
    ]
    ax.bar(np.arange(len(submap.pct_change)), submap.pct_change, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("alternative")
    ax.set_ylabel("probability change [%]")
    ax.set_title(
        f"{submap.pct:+g}% change of {submap.attribute} at alternative "
        f"{submap.alternative} (bar color: hop distance)"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_elasticity_figure(report: ElasticityReport, path) -> None:
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    palette = {"self": "#c0392b", "within": "#e67e22", "outside": "#2980b9"}
    colors = [palette[report.classification(i)] for i in range(len(report.values))]
    ax.bar(np.arange(len(report.values)), report.values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("alternative")
    ax.set_ylabel("elasticity")
    ax.set_title(
        f"Elasticities w.r.t. {report.attribute} at alternative {report.alternative} "
        "(red self, orange within reach, blue outside)"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_loss_trace_figure(trace, path, label: str = "training NLL") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker="." if len(trace) < 80 else None)
    ax.set_xlabel("epoch / iteration")
    ax.set_ylabel(label)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_metrics_figure(rows, path, metric: str = "accuracy") -> None:
    """Bar chart of one averaged metric across sweep configurations."""
    labels = []
    values = []
    for row in rows:
        cfg = row.config
        label = cfg.get("kind", "?")
        if cfg.get("kind") == "gnn":
            label = (
                f"{cfg.get('update', '?')}-{cfg.get('aggregation', '')}"
                f" K{cfg.get('layers', '?')} h{cfg.get('hidden', '?')}"
                f"{'' if cfg.get('skip', True) else ' noskip'}"
            )
        labels.append(label)
        values.append(row.report.mean(metric) if row.report is not None else np.nan)
    fig, ax = plt.subplots(figsize=(max(6.4, 0.32 * len(labels)), 4.8))
    ax.bar(np.arange(len(values)), values, color="#2d7f5e")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=75, fontsize=6, ha="right")
    ax.set_ylabel(metric)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
