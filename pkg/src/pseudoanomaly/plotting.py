"""Figure rendering for run reports. Every figure also has a CSV series beside it.

Rendering is best-effort: callers catch failures and keep the CSV output.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .scoring import BenchmarkTable, ScoreReport, tukey_filter  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}

LOSS_TERMS = ("l_con", "l_adcon", "l_lat", "l_adv", "l_disc")


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def training_curves(epochs: list[dict], out_dir, stem: str = "training_curves") -> list[Path]:
    """Per-epoch loss terms (left) and test AUROC (right)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["epoch", *LOSS_TERMS, "auroc"]
    rows = [[e["epoch"], *(e.get(k) for k in LOSS_TERMS), e.get("auroc")] for e in epochs]
    written = [_write_csv(out_dir / f"{stem}.csv", header, rows)]

    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        xs = [e["epoch"] for e in epochs]
        for k in LOSS_TERMS:
            ax_loss.plot(xs, [e.get(k, 0.0) for e in epochs], marker=".", label=k)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("mean loss")
        ax_loss.legend(frameon=False)
        pts = [(e["epoch"], e["auroc"]) for e in epochs if e.get("auroc") is not None]
        if pts:
            ax_auc.plot(*zip(*pts), marker="o", color="k")
        ax_auc.set_xlabel("epoch")
        ax_auc.set_ylabel("test AUROC")
        ax_auc.set_ylim(0.0, 1.02)
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}.png")
        plt.close(fig)
    written.append(out_dir / f"{stem}.png")
    return written


def score_boxplot(report: ScoreReport, out_dir, stem: str = "score_boxplot") -> list[Path]:
    """Box plot of anomaly scores per label after dropping Tukey outliers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = {}
    for name, value in (("normal", 0), ("anomalous", 1)):
        s = [sc for sc, y in zip(report.scores, report.labels) if y == value]
        if s:
            groups[name] = tukey_filter(s)
    rows = []
    for name, res in groups.items():
        summary = res.summary()
        rows.append([name, *(summary[k] for k in ("q1", "median", "q3", "lower_fence", "upper_fence", "kept", "removed"))])
    written = [_write_csv(out_dir / f"{stem}.csv",
                          ["label", "q1", "median", "q3", "lower_fence", "upper_fence", "kept", "removed"], rows)]

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.boxplot([g.kept for g in groups.values()], showfliers=False)
        ax.set_xticks(range(1, len(groups) + 1), list(groups))
        ax.set_ylabel("anomaly score")
        ax.set_title(f"AUROC {report.auroc:.4f}")
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}.png")
        plt.close(fig)
    written.append(out_dir / f"{stem}.png")
    return written


def benchmark_bars(tables: dict[str, BenchmarkTable], out_dir, stem: str = "benchmark") -> list[Path]:
    """Grouped bars of per-class mean AUROC, one group per class and one bar per table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = sorted({c for t in tables.values() for c, _ in t.rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(tables), 1)
        for k, (name, table) in enumerate(tables.items()):
            values = dict(table.rows)
            ax.bar([i + k * width for i in range(len(classes))], [values.get(c, 0.0) for c in classes],
                   width=width, label=name)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(classes))], [str(c) for c in classes])
        ax.set_xlabel("normal class")
        ax.set_ylabel("mean AUROC")
        ax.set_ylim(0.0, 1.02)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}.png")
        plt.close(fig)
    return [out_dir / f"{stem}.png"]
