"""Collect run directories into summary tables and SVG figures."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

MANIFEST = "manifest.json"


@dataclass
class RunRecord:
    path: Path
    label: str
    seed: int
    metrics: list[dict]


@dataclass
class Collection:
    runs: list[RunRecord] = field(default_factory=list)
    # (label, protocol, setting) -> {seed: error}
    errors: dict[tuple[str, str, str], dict[int, float]] = field(default_factory=lambda: defaultdict(dict))


def run_label(config: dict) -> str:
    """Display name of a training run: its mode, marked when EntMin is on."""
    label = config["train"]["mode"]
    if config["objectives"]["entmin_weight"] > 0:
        label += "+entmin"
    return label


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof 1; 0 for a single value)."""
    v = np.asarray(list(values), dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: bad metrics record ({exc.msg})") from None
    return out


def collect(roots) -> Collection:
    """Find every manifest under ``roots`` and gather metrics and error tables."""
    col = Collection()
    for manifest_path in sorted(p for r in roots for p in Path(r).rglob(MANIFEST)):
        man = json.loads(manifest_path.read_text())
        d = manifest_path.parent
        if man["command"] == "train":
            metrics_path = d / "metrics.jsonl"
            if metrics_path.is_file():
                recs = _read_jsonl(metrics_path)
                if recs:
                    col.runs.append(RunRecord(d, run_label(man["config"]), man["seed"], recs))
        elif man["command"] == "eval":
            table = d / man["layout"]["table"]
            if table.is_file():
                with open(table, newline="") as fh:
                    for row in csv.DictReader(fh):
                        key = (man["run_label"], row["protocol"], row["setting"])
                        col.errors[key][int(row["seed"])] = float(row["error_rate"])
    if not col.runs and not col.errors:
        raise InputError(f"no metrics found under {', '.join(str(r) for r in roots)}")
    return col


def epoch_curve(metrics: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch mean of the total loss."""
    by_epoch = defaultdict(list)
    for m in metrics:
        by_epoch[m["epoch"]].append(m["total"])
    epochs = np.array(sorted(by_epoch))
    return epochs, np.array([np.mean(by_epoch[e]) for e in epochs])


def loss_table(col: Collection) -> list[dict]:
    groups = defaultdict(list)
    for r in col.runs:
        groups[r.label].append(r)
    rows = []
    for label in sorted(groups):
        finals = [epoch_curve(r.metrics)[1][-1] for r in groups[label]]
        m, s = mean_std(finals)
        rows.append({"label": label, "runs": len(finals), "final_loss_mean": m, "final_loss_std": s})
    return rows


def error_table(col: Collection) -> list[dict]:
    rows = []
    for (label, protocol, setting), by_seed in sorted(col.errors.items()):
        m, s = mean_std(by_seed[k] for k in sorted(by_seed))
        rows.append({"label": label, "protocol": protocol, "setting": setting,
                     "seeds": len(by_seed), "error_mean": m, "error_std": s})
    return rows


def _fmt(m: float, s: float) -> str:
    return f"{m:.4f} ± {s:.4f}"


def markdown_summary(losses: list[dict], errors: list[dict]) -> str:
    lines = ["# Run summary", ""]
    if losses:
        lines += ["## Final training loss", "", "| run | runs | final loss (mean ± std) |", "|---|---|---|"]
        lines += [f"| {r['label']} | {r['runs']} | {_fmt(r['final_loss_mean'], r['final_loss_std'])} |"
                  for r in losses]
        lines.append("")
    if errors:
        lines += ["## Test error", "", "| run | protocol | setting | seeds | error (mean ± std) |",
                  "|---|---|---|---|---|"]
        lines += [f"| {r['label']} | {r['protocol']} | {r['setting']} | {r['seeds']} | "
                  f"{_fmt(r['error_mean'], r['error_std'])} |" for r in errors]
        lines.append("")
    return "\n".join(lines)


def write_table_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# figures -----------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"svg.hashsalt": "aetlab", "svg.fonttype": "none", "font.size": 9,
                         "axes.spines.top": False, "axes.spines.right": False})
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_losses(col: Collection, path: Path) -> int:
    """Draw one curve per run; returns the number of curves."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    labels = sorted({r.label for r in col.runs})
    drawn = 0
    colors = dict(zip(labels, plt.rcParams["axes.prop_cycle"].by_key()["color"] * 4))
    for label in labels:
        for i, r in enumerate(x for x in col.runs if x.label == label):
            e, y = epoch_curve(r.metrics)
            ax.plot(e, y, color=colors[label], lw=1.2, alpha=0.8, label=label if i == 0 else None)
            drawn += 1
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (epoch mean)")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return drawn


def plot_errors(rows: list[dict], path: Path) -> None:
    plt = _pyplot()
    cats = sorted({(r["protocol"], r["setting"]) for r in rows})
    labels = sorted({r["label"] for r in rows})
    lookup = {(r["label"], r["protocol"], r["setting"]): r for r in rows}
    width = 0.8 / len(labels)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(cats) + 2), 3.5))
    x = np.arange(len(cats))
    for i, label in enumerate(labels):
        vals = [lookup.get((label, *c)) for c in cats]
        means = [v["error_mean"] if v else math.nan for v in vals]
        stds = [v["error_std"] if v else 0.0 for v in vals]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=label)
    ax.set_xticks(x, [f"{p}\n{s}" for p, s in cats])
    ax.set_ylabel("test error")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def build_report(roots, out_dir) -> dict[str, Path]:
    """Write summary.md, CSV tables and SVG figures; returns the written paths."""
    col = collect(roots)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    losses, errors = loss_table(col), error_table(col)
    written = {"summary": out / "summary.md"}
    written["summary"].write_text(markdown_summary(losses, errors))
    if losses:
        written["losses_csv"] = out / "losses.csv"
        write_table_csv(written["losses_csv"], losses)
        written["loss_curves"] = out / "loss_curves.svg"
        plot_losses(col, written["loss_curves"])
    if errors:
        written["errors_csv"] = out / "errors.csv"
        write_table_csv(written["errors_csv"], errors)
        written["error_bars"] = out / "errors.svg"
        plot_errors(errors, written["error_bars"])
    return written
