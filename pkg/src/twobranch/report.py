"""Score report serialization: structured text, per-sample CSV, figures.

report.txt and records.csv carry only deterministic score data; latency
statistics go to latency.txt so that the score artifacts are byte-identical
across reruns with the same seed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .scoring import STAGES, ScoreReport, roc_points

CSV_COLUMNS = (
    "sample_id",
    "label",
    "anomaly_family",
    "raw_picturable",
    "raw_unpicturable",
    "z_picturable",
    "z_unpicturable",
    "fused",
)


def write_records_csv(report: ScoreReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in report.records:
            writer.writerow(
                [
                    r.sample_id,
                    r.label,
                    r.anomaly_family,
                    repr(r.raw_picturable),
                    repr(r.raw_unpicturable),
                    repr(r.z_picturable),
                    repr(r.z_unpicturable),
                    repr(r.fused),
                ]
            )


def write_report_text(report: ScoreReport, path: str | Path) -> None:
    lines = [
        f"schema_version: {report.schema_version}",
        f"category: {report.category}",
        f"branch: {report.branch}",
        f"test_samples: {len(report.records)}",
    ]
    for block in ("fused", "picturable", "unpicturable"):
        for subset, value in report.aurocs[block].items():
            rendered = "absent" if value is None else repr(value)
            lines.append(f"auroc.{block}.{subset}: {rendered}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_latency_text(report: ScoreReport, path: str | Path) -> None:
    lines = [f"schema_version: {report.schema_version}"]
    for stage in (*STAGES, "total"):
        stats = report.latency_ms[stage]
        lines.append(f"latency.{stage}.mean_ms: {stats['mean']:.6f}")
        lines.append(f"latency.{stage}.p95_ms: {stats['p95']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scores_and_labels(report: ScoreReport, key: str):
    scores = np.asarray([getattr(r, key) for r in report.records])
    labels = np.asarray([0 if r.label == "normal" else 1 for r in report.records])
    return scores, labels


def write_figures(report: ScoreReport, out_dir: str | Path) -> list[Path]:
    """Render the standard report figures as PNG files; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fused, labels = _scores_and_labels(report, "fused")
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.histogram_bin_edges(fused, bins=20)
    for value, name, color in ((0, "normal", "tab:blue"), (1, "anomalous", "tab:red")):
        ax.hist(fused[labels == value], bins=bins, alpha=0.6, label=name, color=color)
    ax.set_xlabel("fused score")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title("Fused score distribution")
    path = out_dir / "score_distribution.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 5))
    for key, name in (
        ("fused", "fused"),
        ("z_picturable", "picturable"),
        ("z_unpicturable", "unpicturable"),
    ):
        scores, labels = _scores_and_labels(report, key)
        if len(set(labels.tolist())) < 2:
            continue
        fpr, tpr = roc_points(scores, labels)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend()
    ax.set_title("ROC (overall)")
    path = out_dir / "roc_curves.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 5))
    styles = {
        "": ("tab:blue", "o", "normal"),
        "picturable": ("tab:orange", "^", "picturable anomaly"),
        "unpicturable": ("tab:red", "s", "unpicturable anomaly"),
    }
    for family, (color, marker, name) in styles.items():
        xs = [r.z_picturable for r in report.records if r.anomaly_family == family]
        ys = [r.z_unpicturable for r in report.records if r.anomaly_family == family]
        if xs:
            ax.scatter(xs, ys, c=color, marker=marker, s=18, alpha=0.8, label=name)
    ax.set_xlabel("picturable z-score")
    ax.set_ylabel("unpicturable z-score")
    ax.legend()
    ax.set_title("Branch scores by anomaly family")
    path = out_dir / "branch_scatter.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    stages = list(STAGES)
    means = [report.latency_ms[s]["mean"] for s in stages]
    ax.bar(stages, means, color="tab:purple")
    ax.set_ylabel("mean latency [ms]")
    ax.set_title("Per-stage scoring latency")
    path = out_dir / "latency_stages.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    return written


def write_report(report: ScoreReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the full report set; returns the paths keyed by artifact name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.txt",
        "records": out_dir / "records.csv",
        "latency": out_dir / "latency.txt",
    }
    write_report_text(report, paths["report"])
    write_records_csv(report, paths["records"])
    write_latency_text(report, paths["latency"])
    for figure_path in write_figures(report, out_dir / "figures"):
        paths[figure_path.stem] = figure_path
    return paths
