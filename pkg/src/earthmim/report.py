"""Run reporting: figures rendered to files next to delimited text outputs.

Everything here is presentation only. Inputs are metrics records, sweep
results, and rank summaries produced elsewhere; outputs are PNG figures,
CSV/TSV tables, and plain-text summaries written into a run directory.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_training_curves(records: list[dict], out_path: str | Path) -> Path:
    """Loss components, learning rate, and target variance over steps."""
    out_path = Path(out_path)
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    axes[0].plot(steps, [r["loss_total"] for r in records], label="total")
    axes[0].plot(steps, [r["loss_patch_v0"] for r in records], label="patch v0", alpha=0.7)
    axes[0].plot(steps, [r["loss_patch_v1"] for r in records], label="patch v1", alpha=0.7)
    axes[0].plot(steps, [r["loss_inst"] for r in records], label="instance", alpha=0.7)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)

    axes[1].plot(steps, [r["lr"] for r in records])
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("learning rate")

    axes[2].plot(steps, [r["target_variance"] for r in records])
    axes[2].set_xlabel("step")
    axes[2].set_ylabel("target variance")

    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_variance_traces(traces: dict[str, list[dict]], out_path: str | Path) -> Path:
    """Target-variance trace per ablation arm, the collapse diagnostic view."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for arm, records in traces.items():
        ax.plot(
            [r["step"] for r in records],
            [r["target_variance"] for r in records],
            label=arm,
        )
    ax.set_xlabel("step")
    ax.set_ylabel("target variance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_ablation_bars(metrics: dict[str, float], out_path: str | Path, ylabel: str = "accuracy") -> Path:
    out_path = Path(out_path)
    arms = list(metrics)
    fig, ax = plt.subplots(figsize=(1.4 * max(len(arms), 3), 4))
    ax.bar(range(len(arms)), [metrics[a] for a in arms])
    ax.set_xticks(range(len(arms)))
    ax.set_xticklabels(arms, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_sweep(sweep, out_path: str | Path) -> Path:
    """Validation and test metric against the (log-scale) lr grid."""
    out_path = Path(out_path)
    lrs = [p["lr"] for p in sweep.grid]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(lrs, sweep.val_metrics, marker="o", label="val")
    ax.plot(lrs, sweep.test_metrics, marker="s", label="test", alpha=0.7)
    selected = sweep.grid[sweep.selected_index]["lr"]
    ax.axvline(selected, color="grey", linestyle=":", label=f"selected {selected:g}")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def sweep_csv(sweep) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lr", "val_metric", "test_metric", "selected"])
    for i, point in enumerate(sweep.grid):
        writer.writerow([
            repr(point["lr"]), repr(sweep.val_metrics[i]), repr(sweep.test_metrics[i]),
            int(i == sweep.selected_index),
        ])
    return buf.getvalue()


def ablation_csv(metrics: dict[str, dict]) -> str:
    """One row per arm; columns are the union of per-arm keys, sorted."""
    keys = sorted({k for row in metrics.values() for k in row})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm"] + keys)
    for arm, row in metrics.items():
        writer.writerow([arm] + [_cell(row.get(k)) for k in keys])
    return buf.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rank_table_text(summary: dict) -> str:
    """Human-readable inverted-rank table: one model per row."""
    tasks = sorted(summary["tasks"])
    models = sorted(summary["average"])
    width = max(len(m) for m in models) + 2
    header = "model".ljust(width) + "".join(t.rjust(12) for t in tasks) + "average".rjust(12)
    lines = [header, "-" * len(header)]
    order = sorted(
        models,
        key=lambda m: (-(summary["average"][m] if summary["average"][m] is not None else -1), m),
    )
    for m in order:
        cells = []
        for t in tasks:
            value = summary["tasks"][t].get(m)
            cells.append(("-" if value is None else f"{value:.3f}").rjust(12))
        avg = summary["average"][m]
        cells.append(("-" if avg is None else f"{avg:.3f}").rjust(12))
        lines.append(m.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def rank_table_csv(summary: dict) -> str:
    tasks = sorted(summary["tasks"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model"] + tasks + ["average"])
    for m in sorted(summary["average"]):
        row = [m]
        for t in tasks:
            value = summary["tasks"][t].get(m)
            row.append("" if value is None else repr(value))
        avg = summary["average"][m]
        row.append("" if avg is None else repr(avg))
        writer.writerow(row)
    return buf.getvalue()


def write_rank_tables(out_dir: str | Path, summary: dict) -> tuple[Path, Path]:
    out = Path(out_dir)
    txt = out / "rank_table.txt"
    csv_path = out / "rank_table.csv"
    txt.write_text(rank_table_text(summary))
    csv_path.write_text(rank_table_csv(summary))
    return txt, csv_path


def eval_report_text(report: dict) -> str:
    """Plain-text rendering of one evaluation report."""
    lines = [f"task: {report['task']}", f"model: {report['model']}", f"mode: {report['mode']}"]
    for key, value in sorted(report.get("provenance", {}).items()):
        lines.append(f"{key}: {value}")
    if report.get("sweep"):
        lines.append("")
        lines.append("lr".rjust(10) + "val".rjust(10) + "test".rjust(10))
        for point in report["sweep"]:
            star = " *" if point.get("selected") else ""
            lines.append(
                f"{point['lr']:>10g}{point['val_metric']:>10.4f}{point['test_metric']:>10.4f}{star}"
            )
    lines.append("")
    lines.append(f"test_metric: {report['test_metric']}")
    return "\n".join(lines) + "\n"


def write_eval_report(out_dir: str | Path, name: str, report: dict) -> tuple[Path, Path]:
    """JSON report plus its human table, named `<name>.json` / `<name>.txt`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{name}.json"
    txt_path = out / f"{name}.txt"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    txt_path.write_text(eval_report_text(report))
    return json_path, txt_path
