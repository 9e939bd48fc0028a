"""Render run CSVs to PNG figures (headless)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy_vs_epsilon(csv_path, out_path) -> Path:
    rows = read_csv(csv_path)
    with plt.rc_context(STYLE):
        kinds = sorted({r["attack"] for r in rows if r["attack"] != "gn"})
        fig, axes = plt.subplots(1, max(len(kinds), 1), squeeze=False, figsize=(4.0 * max(len(kinds), 1), 3.2))
        for ax, kind in zip(axes[0], kinds):
            for model in sorted({r["model"] for r in rows}):
                pts = [(float(r["epsilon"]), float(r["accuracy"])) for r in rows
                       if r["attack"] == kind and r["model"] == model]
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, marker="o", ms=3, label=model)
            ax.set_title(kind.upper())
            ax.set_xlabel("epsilon")
            ax.set_ylabel("accuracy")
            ax.set_ylim(-0.02, 1.02)
            ax.legend()
        return _save(fig, out_path)


def plot_gradient_histogram(csv_path, out_path) -> Path:
    rows = read_csv(csv_path)
    count_cols = [c for c in rows[0] if c.startswith("count")]
    centers = [(float(r["bin_left"]) + float(r["bin_right"])) / 2 for r in rows]
    width = float(rows[0]["bin_right"]) - float(rows[0]["bin_left"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for col in count_cols:
            counts = [max(int(r[col]), 0) for r in rows]
            label = col[len("count_"):] if col.startswith("count_") else "model"
            ax.bar(centers, counts, width=width, alpha=0.5, label=label, log=True)
        ax.set_xlabel("input-gradient value")
        ax.set_ylabel("count")
        ax.legend()
        return _save(fig, out_path)


def plot_pca(csv_path, out_path, title: str = "") -> Path:
    rows = read_csv(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        sc = ax.scatter([float(r["pc1"]) for r in rows], [float(r["pc2"]) for r in rows],
                        c=[int(r["label"]) for r in rows], cmap="tab10", s=4)
        fig.colorbar(sc, ax=ax, label="class")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        if title:
            ax.set_title(title)
        return _save(fig, out_path)


def plot_convergence(csv_path, out_path) -> Path:
    rows = read_csv(csv_path)
    cols = [c for c in rows[0] if c.startswith("psi_delta")]
    epochs = [int(r["epoch"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for col in cols:
            ax.semilogy(epochs, [max(float(r[col]), 1e-16) for r in rows], marker="o", ms=3,
                        label=col.replace("psi_delta_", ""))
        ax.set_xlabel("epoch")
        ax.set_ylabel("Frobenius change of metric")
        if cols:
            ax.legend()
        return _save(fig, out_path)


def render_run(run_dir) -> list[Path]:
    """Render every figure whose source CSV exists in ``run_dir``."""
    run = Path(run_dir)
    made = []
    if (run / "accuracy_vs_epsilon.csv").exists():
        made.append(plot_accuracy_vs_epsilon(run / "accuracy_vs_epsilon.csv", run / "accuracy_vs_epsilon.png"))
    if (run / "gradient_hist.csv").exists():
        made.append(plot_gradient_histogram(run / "gradient_hist.csv", run / "gradient_hist.png"))
    if (run / "pca.csv").exists():
        made.append(plot_pca(run / "pca.csv", run / "pca.png", run.name))
    if (run / "trace.csv").exists():
        rows = read_csv(run / "trace.csv")
        if rows and any(c.startswith("psi_delta") for c in rows[0]):
            made.append(plot_convergence(run / "trace.csv", run / "convergence.png"))
    return made
