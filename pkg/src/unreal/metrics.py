"""Append-only CSV metrics stream."""

import csv
import io
import math
import numbers
from pathlib import Path

COLUMNS = (
    "run_id", "label", "global_step", "updates", "episodes", "train_return", "worker_returns",
    "eval_return", "eval_optimal", "eval_normalized", "loss_a3c", "loss_vr", "loss_pc", "loss_rp",
    "loss_fc", "loss_total", "buffer_fill", "buffer_rewarding_frac", "skipped_updates",
    "lr", "entropy_cost", "lambda_pc",
)
_TEXT = {"run_id", "label", "worker_returns"}
_INT = {"global_step", "updates", "episodes", "skipped_updates"}


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):  # numpy floats included; repr(float) keeps full precision
        return repr(float(value)) if math.isfinite(value) else ""
    if isinstance(value, numbers.Integral) and not isinstance(value, bool):
        return str(int(value))
    return str(value)


class MetricsWriter:
    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists() and self.path.stat().st_size > 0)
        self._fh = open(self.path, "w" if fresh else "a", encoding="utf-8", newline="")
        if fresh:
            self._fh.write(",".join(COLUMNS) + "\n")
            self._fh.flush()

    def write(self, row):
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([_fmt(row.get(c)) for c in COLUMNS])
        self._fh.write(buf.getvalue())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse(name, text):
    if name in _TEXT:
        return text
    if text == "":
        return None
    return int(text) if name in _INT else float(text)


def read_metrics(path):
    """Rows as dicts. A truncated last line (no newline, or malformed) is dropped."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    complete = lines[:-1]  # anything after the final newline is an unfinished row
    if not complete:
        return []
    header = next(csv.reader([complete[0]]))
    rows = []
    for line in complete[1:]:
        if not line:
            continue
        fields = next(csv.reader([line]))
        if len(fields) != len(header):
            continue
        try:
            rows.append({k: _parse(k, v) for k, v in zip(header, fields)})
        except ValueError:
            continue
    return rows


def worker_returns_field(values):
    return ";".join(repr(float(v)) for v in values)
