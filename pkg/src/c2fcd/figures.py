"""Report figures rendered next to the delimited outputs.

Every command that writes a CSV report also drops a PNG figure of the same
content: loss curves for training runs, score bars for evaluations, sweep
curves for ablations, and bar charts for timing.  Uses the Agg backend only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(logs, path) -> None:
    """Per-epoch supervised/consistency/total loss curves, with validation F1
    on a twin axis when available."""
    epochs = [entry.epoch for entry in logs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [e.loss_sup for e in logs], label="supervised loss")
    if any(e.loss_con for e in logs):
        ax.plot(epochs, [e.loss_con for e in logs], label="consistency loss")
    ax.plot(epochs, [e.loss_total for e in logs], label="total loss", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    phases = {e.epoch: e.phase for e in logs}
    boundary = [ep for ep, ph in phases.items() if ph == "semi"]
    if boundary:
        ax.axvline(min(boundary) - 0.5, color="grey", linewidth=0.8, linestyle=":")
    if any(e.val is not None for e in logs):
        ax2 = ax.twinx()
        pts = [(e.epoch, e.val.f1) for e in logs if e.val is not None]
        ax2.plot(*zip(*pts), color="tab:green", label="val F1", alpha=0.7)
        tpts = [(e.epoch, e.teacher_val.f1) for e in logs if e.teacher_val is not None]
        if tpts:
            ax2.plot(*zip(*tpts), color="tab:olive", label="teacher val F1", alpha=0.7)
        ax2.set_ylabel("validation F1")
        ax2.legend(loc="center right", fontsize=8)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_bar(metric_set, path, title: str = "evaluation") -> None:
    """Bar chart of the six pooled scores."""
    names = ("F1", "Pre", "Rec", "OA", "KC", "IoU")
    values = (metric_set.f1, metric_set.precision, metric_set.recall,
              metric_set.oa, metric_set.kc, metric_set.iou)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(names, [100 * v for v in values], color="tab:blue")
    ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("score (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_figure(rows, sweep: str, path) -> None:
    """Sweep summary: bars per variant for the module sweep, F1 curves over
    the swept value otherwise.  ``rows`` are dicts from the ablation CSV."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(7, 4))
    if sweep == "modules":
        labels = [r["variant"] for r in ok]
        ax.bar(labels, [100 * float(r["F1"]) for r in ok], color="tab:blue")
        ax.set_ylabel("val F1 (%)")
        ax.tick_params(axis="x", rotation=30)
    else:
        xs = [float(r["value"]) for r in ok]
        ax.plot(xs, [100 * float(r["F1"]) for r in ok], marker="o", label="F1")
        ax.plot(xs, [100 * float(r["IoU"]) for r in ok], marker="s", label="IoU")
        ax.set_xlabel(sweep)
        ax.set_ylabel("score (%)")
        ax.legend()
    ax.set_title(f"{sweep} sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_timing_figure(rows, path) -> None:
    """Horizontal bars of the timing medians, one per measurement."""
    fig, ax = plt.subplots(figsize=(6, 2 + 0.6 * len(rows)))
    names = [f"{r['measurement']} ({r['unit']})" for r in rows]
    ax.barh(names, [float(r["median"]) for r in rows], color="tab:orange")
    ax.set_xlabel("median")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
