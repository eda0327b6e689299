"""Comparison tables and figures for completed runs.

Table rows are one per run directory, columns are aggregate metrics with
99% confidence half-widths. Figures are rendered headlessly (Agg backend):
a best-heldout-so-far learning curve per run directory and a bar chart of
final test metrics with CI error bars.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .harness import FORMAT_VERSION, RunArtifactError, _write_csv  # noqa: E402


def _format_cell(entry: dict | None) -> str:
    if entry is None:
        return "-"
    if entry.get("half_width") is None:
        return f"{entry['mean']:.4f}"
    return f"{entry['mean']:.4f} +- {entry['half_width']:.4f}"


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Fixed-width text table; rows are dicts of already-formatted strings."""
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(r[c].ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def _dedup_labels(summaries):
    names = [name for name, _, _ in summaries]
    out = []
    for name, path, summary in summaries:
        label = str(path) if names.count(name) > 1 else name
        out.append((label, path, summary))
    return out


def _epoch_curve(run_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    """Mean best_heldout_so_far per epoch across all (combo, seed) runs."""
    path = run_dir / "metrics.jsonl"
    if not path.is_file():
        raise RunArtifactError(f"no metrics.jsonl in {run_dir}")
    by_epoch: dict[int, list[float]] = {}
    for line in path.read_text().splitlines():
        entry = json.loads(line)
        by_epoch.setdefault(entry["epoch"], []).append(entry["best_heldout_so_far"])
    epochs = np.array(sorted(by_epoch))
    means = np.array([np.mean(by_epoch[e]) for e in epochs])
    return epochs, means


def render_report(summaries: list[tuple[str, Path, dict]], out_dir: Path) -> str:
    """Write report.txt/report.csv plus both figures; return the text table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = _dedup_labels(summaries)

    metric_keys: list[str] = []
    for _, _, summary in summaries:
        for key in sorted(summary["aggregate"]):
            if key not in metric_keys:
                metric_keys.append(key)
    metric_keys.sort(key=lambda k: (k != "best_heldout", k))

    text_rows = []
    csv_rows = []
    for label, _, summary in summaries:
        agg = summary["aggregate"]
        row = {"run": label, "n_runs": str(len(summary["runs"]))}
        for key in metric_keys:
            row[key] = _format_cell(agg.get(key))
        text_rows.append(row)
        for key in metric_keys:
            entry = agg.get(key)
            if entry is None:
                continue
            csv_rows.append({"run": label, "metric": key, "mean": entry["mean"],
                             "half_width": ("" if entry["half_width"] is None
                                            else entry["half_width"]),
                             "n": entry["n"]})
    table = format_table(text_rows, ["run", "n_runs"] + metric_keys)
    (out_dir / "report.txt").write_text(table + "\n")
    _write_csv(out_dir / "report.csv", csv_rows)
    _plot_heldout_curves(summaries, out_dir / "heldout_curves.png")
    _plot_test_metrics(summaries, metric_keys, out_dir / "test_metrics.png")
    (out_dir / "report.json").write_text(json.dumps(
        {"format_version": FORMAT_VERSION,
         "rows": [{"run": label, "aggregate": summary["aggregate"]}
                  for label, _, summary in summaries]},
        indent=2, sort_keys=True) + "\n")
    return table


def _plot_heldout_curves(summaries, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, run_dir, _ in summaries:
        epochs, means = _epoch_curve(run_dir)
        ax.plot(epochs, means, marker="o", markersize=3, label=label)
    ax.set_xlabel("meta-epoch")
    ax.set_ylabel("best heldout reward so far (mean over runs)")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_test_metrics(summaries, metric_keys: list[str], path: Path) -> None:
    test_keys = [k for k in metric_keys if k.startswith("test_")] or metric_keys
    labels = [label for label, _, _ in summaries]
    x = np.arange(len(labels), dtype=np.float64)
    width = 0.8 / max(1, len(test_keys))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for j, key in enumerate(test_keys):
        means, errs = [], []
        for _, _, summary in summaries:
            entry = summary["aggregate"].get(key)
            means.append(entry["mean"] if entry else 0.0)
            errs.append(entry["half_width"] or 0.0 if entry else 0.0)
        ax.bar(x + j * width, means, width, yerr=errs, capsize=3, label=key)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("metric (mean with 99% CI)")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grid_search(rows: list[dict], path: Path) -> None:
    """Heldout reward against p_explore with CI error bars."""
    ps = [r["p_explore"] for r in rows]
    means = [r["mean_heldout"] for r in rows]
    errs = [r["half_width"] or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(ps, means, yerr=errs, marker="o", capsize=3)
    ax.set_xlabel("p_explore")
    ax.set_ylabel("mean best heldout reward")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
