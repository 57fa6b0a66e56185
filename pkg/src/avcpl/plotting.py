"""Figures from metrics rows: WER curves per mode and pseudo-label age / quality."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(x):
    try:
        v = float(x)
    except (TypeError, ValueError):
        return math.nan
    return v


def plot_wer_curves(rows, path) -> Path | None:
    """WER against step, one line per (run, split, mode, decode)."""
    series = {}
    for r in rows:
        key = (r.get("run", ""), r["split"], r["mode"], r["decode"])
        series.setdefault(key, []).append((_num(r["step"]), _num(r["wer"])))
    series = {k: v for k, v in series.items() if len(v) > 1}
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for (run, split, mode, dec), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker=".", label=f"{run} {split} {mode} {dec}".strip())
    ax.set_xlabel("update")
    ax.set_ylabel("WER (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_final_wer(rows, path) -> Path | None:
    """Bar chart of the last WER per (run, mode, decode) on non-validation splits."""
    last = {}
    for r in rows:
        if r["split"] == "valid":
            continue
        last[(r.get("run", ""), r["mode"], r["decode"])] = _num(r["wer"])
    if not last:
        return None
    keys = sorted(last)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(keys) + 2), 4))
    ax.bar(range(len(keys)), [100 * last[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels([" ".join(k).strip() for k in keys], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("WER (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_pl_stats(rows, path) -> Path | None:
    pts = [(_num(r["step"]), _num(r["pl_age_mean"]), _num(r.get("pl_wer_vs_gold")), r.get("run", ""))
           for r in rows]
    pts = [p for p in pts if not math.isnan(p[1])]
    if not pts:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for run in sorted({p[3] for p in pts}):
        sub = sorted(p for p in pts if p[3] == run)
        ax.plot([p[0] for p in sub], [p[1] for p in sub], marker=".", label=f"{run} PL age")
    ax.set_xlabel("update")
    ax.set_ylabel("mean PL age (updates)")
    ax2 = ax.twinx()
    for run in sorted({p[3] for p in pts}):
        sub = sorted(p for p in pts if p[3] == run and not math.isnan(p[2]))
        if sub:
            ax2.plot([p[0] for p in sub], [100 * p[2] for p in sub], ls="--", label=f"{run} PL WER")
    ax2.set_ylabel("PL WER vs gold (%)")
    ax.legend(loc="upper left", fontsize=7)
    ax2.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def render_report(metrics_csv, outdir=None) -> list[Path]:
    metrics_csv = Path(metrics_csv)
    outdir = Path(outdir) if outdir else metrics_csv.parent
    outdir.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(metrics_csv)
    made = [plot_wer_curves(rows, outdir / "wer_curves.png"),
            plot_final_wer(rows, outdir / "wer_final.png"),
            plot_pl_stats(rows, outdir / "pl_stats.png")]
    return [p for p in made if p is not None]
