"""Rendering of run results: accuracy tables and confidence histograms."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .pipeline import RunManifest, build_datasets

HIST_BINS = 50


def accuracy_table_markdown(run_dir: Path) -> str:
    """Markdown table of stage-wise and final evaluation accuracies."""
    manifest = RunManifest.load(run_dir / "manifest.json")
    lines = ["| Metric | Top-1 |", "| --- | --- |"]
    for stage in ("bootstrap", "ssl", "final"):
        top1 = manifest.stages.get(stage, {}).get("test_top1")
        if top1 is not None:
            lines.append(f"| After {stage} | {100 * top1:.2f} |")
    eval_path = run_dir / "eval.json"
    if eval_path.exists():
        payload = json.loads(eval_path.read_text(encoding="utf-8"))
        names = {
            "plain_null": "Final (null labels)",
            "tta_null": "Final + test-time aug. (null labels)",
            "plain_noisy": "Final (noisy labels)",
            "tta_noisy": "Final + test-time aug. (noisy labels)",
        }
        for key, label in names.items():
            if key in payload:
                lines.append(f"| {label} | {100 * payload[key]['top1']:.2f} |")
    return "\n".join(lines) + "\n"


def confidence_histogram(run_dir: Path, config: RunConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(bin edges, correct counts, incorrect counts) of bootstrap confidences.

    Needs the hidden true labels, so this is synthetic-run only; the
    dataset is rebuilt from the config to recover them.
    """
    records_path = run_dir / "records.csv"
    indices, preds, confs = [], [], []
    with open(records_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            indices.append(int(row["index"]))
            preds.append(int(row["predicted_class"]))
            confs.append(float(row["confidence"]))
    train, _ = build_datasets(config)
    truth = train.true_labels_oracle()
    preds = np.asarray(preds)
    confs = np.asarray(confs)
    correct = preds == truth[np.asarray(indices)]
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    hist_correct, _ = np.histogram(confs[correct], bins=edges)
    hist_incorrect, _ = np.histogram(confs[~correct], bins=edges)
    return edges, hist_correct, hist_incorrect


def write_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render report.md plus histogram CSV/PNG; returns written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    report_path = out_dir / "report.md"
    report_path.write_text(
        f"# Run report: {run_dir.name}\n\n" + accuracy_table_markdown(run_dir),
        encoding="utf-8",
    )
    written.append(report_path)
    manifest = RunManifest.load(run_dir / "manifest.json")
    config = manifest.config()
    if (run_dir / "records.csv").exists() and config.data.source == "synthetic":
        edges, correct, incorrect = confidence_histogram(run_dir, config)
        csv_path = out_dir / "confidence_hist.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_low", "bin_high", "correct", "incorrect"])
            for i in range(len(correct)):
                writer.writerow([f"{edges[i]:.3f}", f"{edges[i + 1]:.3f}", int(correct[i]), int(incorrect[i])])
        written.append(csv_path)
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centers = 0.5 * (edges[:-1] + edges[1:])
        width = edges[1] - edges[0]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(centers, correct, width=width, label="correct", alpha=0.7)
        ax.bar(centers, incorrect, width=width, label="incorrect", alpha=0.7)
        ax.set_xlabel("confidence")
        ax.set_ylabel("samples")
        ax.set_yscale("symlog")
        ax.legend()
        fig.tight_layout()
        png_path = out_dir / "confidence_hist.png"
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        written.append(png_path)
    return written
