"""Static learning-curve, robustness and ablation plots from metrics files.

Each figure is written as SVG next to a CSV holding the plotted numbers.
Outputs depend only on the input files.
"""

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics  # noqa: E402
from .sweep import final_score, robustness_curve  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "unreal-plots"


class EmptyMetrics(Exception):
    pass


def load_runs(paths):
    """{label: {run_id: rows}} from any number of metrics files."""
    runs = defaultdict(dict)
    for path in paths:
        for row in read_metrics(path):
            runs[row["label"]].setdefault(row["run_id"], []).append(row)
    if not runs:
        raise EmptyMetrics("no parsable metrics rows in " + ", ".join(str(p) for p in paths))
    return runs


def top_k_curve(runs, k=3):
    """Mean train_return of the k best runs (by final score) at every step they share."""
    scored = [(final_score(rows), rid) for rid, rows in runs.items()]
    ranked = sorted(scored, key=lambda t: (t[0] is None, -(t[0] or 0.0), t[1]))
    best = [rid for _, rid in ranked[:k]]
    by_step = defaultdict(list)
    for rid in best:
        for row in runs[rid]:
            if row["train_return"] is not None:
                by_step[row["global_step"]].append(row["train_return"])
    steps = sorted(s for s, vals in by_step.items() if len(vals) == len(best))
    return steps, [sum(by_step[s]) / len(by_step[s]) for s in steps]


def ablation_ratios(runs_by_label, baseline="a3c", k=3):
    """Top-k mean final score per label divided by the baseline label's."""
    means = {}
    for label, runs in runs_by_label.items():
        scores = sorted((s for s in (final_score(r) for r in runs.values()) if s is not None), reverse=True)[:k]
        means[label] = sum(scores) / len(scores) if scores else None
    if baseline not in means:
        baseline = sorted(means)[0]
    base = means[baseline]
    return baseline, {label: (m / base if m is not None and base else None) for label, m in means.items()}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot(paths, out_dir, baseline="a3c"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_by_label = load_runs(paths)
    labels = sorted(runs_by_label)

    fig, ax = plt.subplots(figsize=(6, 4))
    with open(out_dir / "learning_curves.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "global_step", "top3_mean_return"])
        for label in labels:
            steps, values = top_k_curve(runs_by_label[label])
            writer.writerows([label, s, repr(float(v))] for s, v in zip(steps, values))
            ax.plot(steps, values, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean return, top-3 runs")
    ax.legend()
    _save(fig, out_dir / "learning_curves.svg")

    fig, ax = plt.subplots(figsize=(6, 4))
    with open(out_dir / "robustness.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "rank", "final_score"])
        for label in labels:
            curve = robustness_curve(final_score(rows) for rows in runs_by_label[label].values())
            writer.writerows([label, i, repr(float(v))] for i, v in enumerate(curve))
            ax.plot(range(len(curve)), curve, marker="o", label=label)
    ax.set_xlabel("job rank")
    ax.set_ylabel("final score")
    ax.legend()
    _save(fig, out_dir / "robustness.svg")

    base, ratios = ablation_ratios(runs_by_label, baseline)
    fig, ax = plt.subplots(figsize=(6, 4))
    with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "baseline", "ratio"])
        for label in labels:
            writer.writerow([label, base, "" if ratios[label] is None else repr(float(ratios[label]))])
    ax.bar(labels, [ratios[label] or 0.0 for label in labels])
    ax.axhline(1.0, color="k", linewidth=0.8)
    ax.set_ylabel(f"final score / {base}")
    _save(fig, out_dir / "ablation.svg")
    return {"labels": labels, "ratios": ratios, "baseline": base}
