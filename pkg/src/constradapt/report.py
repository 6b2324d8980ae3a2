"""Comparison tables and plots over finished run directories."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

REQUIRED = ("resolved-spec.json", "summary.json", "metrics.csv", "runrecord.jsonl")


class ReportError(ValueError):
    """Run directories are incomplete or cannot be compared."""


def _fmt(stat, scale=1.0):
    if not stat or stat.get("mean") is None:
        return "N/A"
    return f"{stat['mean'] * scale:.1f}±{stat['sd'] * scale:.1f}"


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir}: not a directory")
    missing = [name for name in REQUIRED if not (run_dir / name).exists()]
    if missing:
        raise ReportError(f"{run_dir}: missing artifacts {missing}")
    if (run_dir / "FAILED").exists():
        raise ReportError(f"{run_dir}: run is marked FAILED")
    summary = json.loads((run_dir / "summary.json").read_text())
    rows = [json.loads(line) for line in (run_dir / "runrecord.jsonl").read_text().splitlines() if line]
    errors = None
    if (run_dir / "size_errors.json").exists():
        errors = json.loads((run_dir / "size_errors.json").read_text())
    return {"dir": run_dir, "summary": summary, "epochs": rows, "size_errors": errors}


def comparison_table(runs: list[dict]) -> list[dict]:
    """One row per run; DSC in percent, delta relative to the first run."""
    base = runs[0]["summary"].get("dsc", {}).get("mean")
    table = []
    for r in runs:
        s = r["summary"]
        dsc = s.get("dsc", {})
        delta = None
        if base is not None and dsc.get("mean") is not None:
            delta = 100 * (dsc["mean"] - base)
        table.append({
            "run": r["dir"].name, "method": s["method"],
            "dsc": _fmt(dsc, 100), "hd95": _fmt(s.get("hd95")),
            "delta_dsc": None if delta is None else round(delta, 2),
            "s_per_batch": s.get("timing", {}).get("seconds_per_batch"),
        })
    return table


def render_text(table: list[dict]) -> str:
    cols = ["method", "dsc", "delta_dsc", "hd95", "s_per_batch", "run"]
    heads = ["Method", "DSC (%)", "ΔDSC", "HD95", "s/batch", "Run"]
    cells = [[_cell(row[c], c) for c in cols] for row in table]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(heads)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    return "\n".join([line(heads), line(["-" * w for w in widths])] + [line(r) for r in cells]) + "\n"


def _cell(v, col):
    if v is None:
        return "-"
    if col == "delta_dsc":
        return f"{v:+.2f}"
    if col == "s_per_batch":
        return f"{v:.4f}"
    return str(v)


def report(run_dirs, out_dir) -> dict[str, Path]:
    """Write report.txt, report.csv and PNG plots into ``out_dir``."""
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    ks = {r["summary"]["k"] for r in runs}
    if len(ks) > 1:
        raise ReportError(f"runs have incompatible class counts K={sorted(ks)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = comparison_table(runs)
    paths = {"text": out_dir / "report.txt", "csv": out_dir / "report.csv"}
    paths["text"].write_text(render_text(table))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    paths.update(_plots(runs, out_dir))
    return paths


def _plots(runs, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        rows = [e for e in r["epochs"] if e.get("phase") == "adapt" and "total" in e]
        if rows:
            ax.plot([e["epoch"] for e in rows], [e["total"] for e in rows], label=r["summary"]["method"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    if ax.lines:
        ax.legend(fontsize=8)
    paths["loss_curves"] = out_dir / "loss_curves.png"
    fig.tight_layout()
    fig.savefig(paths["loss_curves"], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    means = [100 * (r["summary"].get("dsc", {}).get("mean") or 0.0) for r in runs]
    sds = [100 * (r["summary"].get("dsc", {}).get("sd") or 0.0) for r in runs]
    ax.bar(range(len(runs)), means, yerr=sds, capsize=3)
    ax.set_xticks(range(len(runs)), [r["summary"]["method"] for r in runs], rotation=30, ha="right")
    ax.set_ylabel("DSC (%)")
    ax.set_ylim(0, 100)
    paths["dsc_bars"] = out_dir / "dsc_bars.png"
    fig.tight_layout()
    fig.savefig(paths["dsc_bars"], dpi=100)
    plt.close(fig)

    with_errors = [r for r in runs if r["size_errors"] and r["size_errors"]["relative"]]
    if with_errors:
        fig, ax = plt.subplots(figsize=(6, 4))
        bins = np.linspace(-1.5, 1.5, 31)
        for r in with_errors:
            rel = np.clip(r["size_errors"]["relative"], bins[0], bins[-1])
            ax.hist(rel, bins=bins, density=True, alpha=0.5, label=r["summary"]["method"])
        ax.set_xlabel("(estimated - true) / true size")
        ax.set_ylabel("normalised frequency")
        ax.legend(fontsize=8)
        paths["size_error_hist"] = out_dir / "size_error_hist.png"
        fig.tight_layout()
        fig.savefig(paths["size_error_hist"], dpi=100)
        plt.close(fig)
    return paths
