"""Log-uniform hyperparameter sweeps over learning rate, entropy cost and lambda_PC."""

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, parse_config, to_dict
from .metrics import read_metrics

log = logging.getLogger(__name__)


@dataclass
class SweepSpec:
    base: RunConfig
    num_samples: int = 50
    lr_range: tuple = (1e-4, 5e-3)
    entropy_range: tuple = (5e-4, 1e-2)
    lambda_pc_range: tuple = (0.01, 0.1)
    sweep_seed: int = 0
    seeds: tuple = (None,)  # None keeps the base config's seed
    parallel_jobs: int = 1

    def __post_init__(self):
        errors = []
        for name in ("lr_range", "entropy_range", "lambda_pc_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                errors.append(f"{name}: need 0 < low < high, got [{lo}, {hi}]")
        if self.num_samples < 1:
            errors.append("num_samples: must be >= 1")
        if self.parallel_jobs < 1:
            errors.append("parallel_jobs: must be >= 1")
        if errors:
            raise ConfigError(errors)


def log_uniform(rng, low, high, size=None):
    return np.exp(rng.uniform(np.log(low), np.log(high), size=size))


def sample_hyperparameters(spec):
    """Deterministic in (sweep_seed, num_samples)."""
    rng = np.random.default_rng(spec.sweep_seed)
    points = []
    for _ in range(spec.num_samples):
        points.append({
            "lr": float(log_uniform(rng, *spec.lr_range)),
            "entropy_cost": float(log_uniform(rng, *spec.entropy_range)),
            "lambda_pc": float(log_uniform(rng, *spec.lambda_pc_range)),
        })
    return points


def load_sweep(path):
    raw = yaml.safe_load(Path(path).read_text()) or {}
    errors = []
    allowed = {f.name for f in dataclasses.fields(SweepSpec)}
    for key in raw:
        if key not in allowed:
            errors.append(f"{key}: unknown key")
    if "base" not in raw:
        errors.append("base: required key missing")
    if errors:
        raise ConfigError(errors)
    kwargs = dict(raw)
    kwargs["base"] = parse_config(raw["base"])
    for name in ("lr_range", "entropy_range", "lambda_pc_range"):
        if name in kwargs:
            kwargs[name] = tuple(float(v) for v in kwargs[name])
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    return SweepSpec(**kwargs)


def configure(base, point, index, seed=None):
    raw = to_dict(base)
    raw["optim"]["learning_rate"] = point["lr"]
    raw["loss"]["entropy_cost"] = point["entropy_cost"]
    raw["loss"]["lambda_pc"] = point["lambda_pc"]
    if seed is not None:
        raw["seed"] = seed
    raw["run_id"] = f"{base.label}-h{index:03d}-s{raw['seed']}"
    raw["label"] = base.label
    return parse_config(raw)


def final_score(rows):
    """Mean training return over the last 100 episodes at the final row."""
    for row in reversed(rows):
        if row.get("train_return") is not None:
            return float(row["train_return"])
    for row in reversed(rows):
        if row.get("eval_return") is not None:
            return float(row["eval_return"])
    return None


def steps_to_threshold(rows, threshold, key="train_return"):
    """First global step whose ``key`` reaches ``threshold``; None if never."""
    for row in rows:
        if row.get(key) is not None and row[key] >= threshold:
            return int(row["global_step"])
    return None


def best_median_steps(summary, sweep_dir, threshold, key="train_return"):
    """Median over seeds of steps-to-threshold for every sampled point (inf when
    a seed never gets there). Returns (best point index, its median, all medians)."""
    by_point = {}
    for entry in summary:
        index = int(entry["run_id"].rsplit("-h", 1)[1].split("-")[0])
        path = Path(sweep_dir) / entry["run_id"] / "metrics.csv"
        rows = read_metrics(path) if entry["status"] == "ok" and path.exists() else []
        steps = steps_to_threshold(rows, threshold, key)
        by_point.setdefault(index, []).append(np.inf if steps is None else float(steps))
    medians = {i: float(np.median(v)) for i, v in sorted(by_point.items())}
    best = min(medians, key=lambda i: (medians[i], i))
    return best, medians[best], medians


def _run_one(args):
    from .trainer import train  # deferred so worker processes import lazily

    config, out_dir = args
    try:
        result = train(config, out_dir=out_dir)
        return {"run_id": config.run_id, "status": "ok", "score": final_score(result.rows),
                "rows": result.rows, "error": ""}
    except Exception as exc:  # a failed run is recorded, the sweep continues
        log.exception("sweep run %s failed", config.run_id)
        return {"run_id": config.run_id, "status": "failed", "score": None, "rows": [], "error": repr(exc)}


def run_sweep(spec, out_dir, runner=None):
    """Run every sampled point; write summary.csv and robustness.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = sample_hyperparameters(spec)
    jobs = []
    for i, point in enumerate(points):
        for seed in spec.seeds:
            cfg = configure(spec.base, point, i, seed)
            if spec.parallel_jobs > 1:
                cfg.num_workers = max(1, cfg.num_workers // spec.parallel_jobs)
            jobs.append((cfg, point, out_dir / cfg.run_id))
    runner = runner or _run_one
    args = [(cfg, path) for cfg, _, path in jobs]
    if spec.parallel_jobs > 1 and runner is _run_one:
        with ProcessPoolExecutor(max_workers=spec.parallel_jobs) as pool:
            results = list(pool.map(runner, args))
    else:
        results = [runner(a) for a in args]
    summary = []
    for (cfg, point, _), res in zip(jobs, results):
        summary.append({"run_id": cfg.run_id, "seed": cfg.seed, **point, "status": res["status"],
                        "final_score": res["score"], "error": res["error"]})
    write_summary(out_dir / "summary.csv", summary)
    write_robustness(out_dir / "robustness.csv", summary)
    return summary


def _sort_key(entry):
    score = entry["final_score"]
    return (score is None, -(score if score is not None else 0.0), entry["run_id"])


def write_summary(path, summary):
    fields = ["run_id", "seed", "lr", "entropy_cost", "lambda_pc", "status", "final_score", "error"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for entry in sorted(summary, key=_sort_key):
            writer.writerow({k: ("" if entry[k] is None else entry[k]) for k in fields})


def robustness_curve(scores):
    """Final scores sorted descending (failed runs excluded)."""
    return sorted((s for s in scores if s is not None), reverse=True)


def write_robustness(path, summary):
    curve = robustness_curve(e["final_score"] for e in summary)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("rank,final_score\n")
        for rank, score in enumerate(curve):
            fh.write(f"{rank},{float(score)!r}\n")
    return curve
