"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_bench(rows, path) -> Path:
    """Log-log cost per kind and mode against sequence length."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    series = sorted({(r["kind"], r["mode"]) for r in rows})
    for kind, mode in series:
        pts = sorted((int(r["T"]), float(r["median_ns"]) / 1e6) for r in rows if r["kind"] == kind and r["mode"] == mode)
        style = "-o" if mode == "recurrent" else "--s"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=f"{kind} ({mode})", markersize=4)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("median time [ms]")
    ax.set_title("recurrent step vs full recompute")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(records, path, title: str | None = None) -> Path:
    """Training loss per epoch, plus any validation series present in the records."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    epochs = [r["epoch"] for r in records]
    ax.plot(epochs, [r["train_loss"] for r in records], label="train loss")
    val_keys = sorted({k for r in records for k in r if k.startswith("val_")})
    twin = None
    for key in val_keys:
        pts = [(r["epoch"], r[key]) for r in records if r.get(key) is not None]
        if not pts:
            continue
        target = ax
        if key in ("val_accuracy", "val_f1", "val_iou"):
            twin = twin or ax.twinx()
            target = twin
        target.plot([p[0] for p in pts], [p[1] for p in pts], "o-", markersize=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    handles, labels = ax.get_legend_handles_labels()
    if twin is not None:
        twin.set_ylabel("score")
        h2, l2 = twin.get_legend_handles_labels()
        handles, labels = handles + h2, labels + l2
    ax.legend(handles, labels, fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
