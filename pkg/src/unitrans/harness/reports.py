"""JSON and Markdown reports, SVG plots."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))


def markdown_table(headers, rows) -> str:
    def fmt(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    lines += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def latency_markdown(report) -> str:
    d = report.to_dict()
    rows = []
    for r in d["ar_beam5"]:
        rows.append(["AR beam5", r["length"], r["n"], r["mean_s"] * 1e3, f"{r['calls_min']}-{r['calls_max']}", "1.0"])
    for label, rs in d["nar"].items():
        for r in rs:
            rows.append([f"NAR {label}", r["length"], r["n"], r["mean_s"] * 1e3,
                         f"{r['calls_min']}-{r['calls_max']}", f"{r['speedup']:.2f}"])
    return markdown_table(["decoder", "length", "utts", "mean ms", "decoder calls", "speedup"], rows)


def plot_latency(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lengths = sorted(report.ar)
    ax.plot(lengths, [report.ar[L].mean_time * 1e3 for L in lengths], "o-", label="AR beam 5")
    for label, buckets in report.nar.items():
        ls = sorted(buckets)
        ax.plot(ls, [buckets[L].mean_time * 1e3 for L in ls], "s-", label=f"NAR {label}")
    ax.set_xlabel("target length (units)")
    ax.set_ylabel("decode time (ms)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_bleu_vs_iterations(points: dict, path) -> None:
    """``points`` maps a series label to ``{iterations: bleu}``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, series in points.items():
        its = sorted(series)
        ax.plot(its, [series[t] for t in its], "o-", label=label)
    ax.set_xlabel("mask-predict iterations T")
    ax.set_ylabel("BLEU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
