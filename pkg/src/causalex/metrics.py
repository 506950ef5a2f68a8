"""Per-step experiment traces: storage, export/import, aggregation, sample efficiency.

CSV layout: comment lines ``# key=value`` carrying the schema version and run
metadata, then a header row, then one row per step.  Floats are written with
``repr`` so a round trip is exact.  Optional columns are left blank when a
value was not recorded (graph F1 with no known truth, timings when timing is
off, selection size on steps without discovery).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

TRACE_COLUMNS = ("step", "episode", "action_index", "r_i", "r_a", "r", "train_loss",
                 "holdout_loss", "graph_f1", "discovery_time_ms", "selected_count")
INT_COLUMNS = ("step", "episode", "action_index", "selected_count")
OPTIONAL_COLUMNS = ("graph_f1", "discovery_time_ms", "selected_count")


class TraceError(ValueError):
    """Malformed, misaligned or non-finite trace data."""


def _fmt(col: str, value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        if col in OPTIONAL_COLUMNS:
            return ""
        raise TraceError(f"missing value in required column {col!r}")
    if col in INT_COLUMNS:
        return str(int(value))
    value = float(value)
    if not math.isfinite(value):
        raise TraceError(f"non-finite value {value} in column {col!r}")
    return repr(value)


def _parse(col: str, text: str):
    if text == "":
        if col not in OPTIONAL_COLUMNS:
            raise TraceError(f"blank value in required column {col!r}")
        return math.nan
    return int(text) if col in INT_COLUMNS else float(text)


def check_row(row: dict) -> None:
    """Raise TraceError on a non-finite required value."""
    for col in TRACE_COLUMNS:
        _fmt(col, row.get(col))


@dataclass
class ExperimentTrace:
    """Column arrays plus immutable run metadata.  Missing optional values are NaN."""

    columns: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise TraceError("trace columns differ in length")
        missing = set(TRACE_COLUMNS) - set(self.columns)
        if missing:
            raise TraceError(f"trace lacks columns {sorted(missing)}")
        steps = np.asarray(self.columns["step"])
        if len(steps) > 1 and (np.diff(steps) <= 0).any():
            raise TraceError("step indices must be strictly increasing")

    @classmethod
    def from_rows(cls, rows: list[dict], metadata: dict | None = None) -> "ExperimentTrace":
        cols = {}
        for col in TRACE_COLUMNS:
            vals = [r.get(col) for r in rows]
            vals = [math.nan if v is None else v for v in vals]
            dtype = np.int64 if col in INT_COLUMNS and not any(isinstance(v, float) and math.isnan(v) for v in vals) else float
            cols[col] = np.array(vals, dtype=dtype)
        return cls(cols, dict(metadata or {}))

    def __len__(self) -> int:
        return len(self.columns["step"])

    def __getitem__(self, col: str) -> np.ndarray:
        return self.columns[col]

    def rows(self) -> list[dict]:
        out = []
        for k in range(len(self)):
            out.append({c: self.columns[c][k].item() for c in TRACE_COLUMNS})
        return out

    def _formatted(self) -> list[list[str]]:
        return [_fmt_column(c, self.columns[c]) for c in TRACE_COLUMNS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_csv_header(buf, self.metadata)
        buf.writelines(",".join(rec) + "\n" for rec in zip(*self._formatted()))
        return buf.getvalue()

    def to_json(self) -> str:
        # JSON number text is the same repr used for CSV, so both round-trip exactly
        body = ",".join("[" + ",".join(v or "null" for v in rec) + "]" for rec in zip(*self._formatted()))
        head = json.dumps({"schema_version": SCHEMA_VERSION, "metadata": self.metadata,
                           "columns": list(TRACE_COLUMNS)}, sort_keys=True, separators=(",", ":"))
        return head[:-1] + ',"rows":[' + body + "]}"


def _fmt_column(col: str, values: np.ndarray) -> list[str]:
    values = np.asarray(values)
    missing = np.isnan(values) if values.dtype.kind == "f" else np.zeros(len(values), bool)
    if missing.any() and col not in OPTIONAL_COLUMNS:
        raise TraceError(f"missing value in required column {col!r}")
    if col in INT_COLUMNS:
        out = [str(int(v)) for v in values[~missing]] if missing.any() else [str(v) for v in values.astype(np.int64).tolist()]
    else:
        present = values[~missing].astype(float)
        if not np.isfinite(present).all():
            raise TraceError(f"non-finite value in column {col!r}")
        out = [repr(v) for v in present.tolist()]
    if not missing.any():
        return out
    full = [""] * len(values)
    for k, text in zip(np.flatnonzero(~missing).tolist(), out):
        full[k] = text
    return full


def _meta_lines(metadata: dict) -> list[str]:
    lines = [f"# schema_version={SCHEMA_VERSION}"]
    for key in sorted(metadata):
        lines.append(f"# {key}={json.dumps(metadata[key], sort_keys=True, separators=(',', ':'))}")
    return lines


def write_csv_header(fh, metadata: dict) -> None:
    for line in _meta_lines(metadata):
        fh.write(line + "\n")
    fh.write(",".join(TRACE_COLUMNS) + "\n")


def write_csv_row(fh, row: dict) -> None:
    fh.write(",".join(_fmt(c, row.get(c)) for c in TRACE_COLUMNS) + "\n")


class TraceWriter:
    """Incremental CSV writer; rows reach disk as they are produced."""

    def __init__(self, path: str | Path, metadata: dict, flush_every: int = 100):
        self.path = Path(path)
        self.rows: list[dict] = []
        self.metadata = dict(metadata)
        self.flush_every = flush_every
        try:
            self._fh = open(self.path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot open trace file {self.path}: {exc}") from exc
        write_csv_header(self._fh, self.metadata)

    def write(self, row: dict) -> None:
        check_row(row)
        self.rows.append(dict(row))
        write_csv_row(self._fh, row)
        if len(self.rows) % self.flush_every == 0:
            self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def trace(self) -> ExperimentTrace:
        return ExperimentTrace.from_rows(self.rows, self.metadata)


# --------------------------------------------------------------------------
# export / import
# --------------------------------------------------------------------------


def export_trace(trace: ExperimentTrace, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown trace format {fmt!r}")
    text = trace.to_csv() if fmt == "csv" else trace.to_json()
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write trace {path}: {exc}") from exc
    return path


def read_trace(path: str | Path) -> ExperimentTrace:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc}") from exc
    if path.suffix == ".json":
        return _trace_from_json(text, path)
    return _trace_from_csv(text, path)


def _check_version(version, path) -> None:
    if version != SCHEMA_VERSION:
        raise TraceError(f"{path}: unsupported schema version {version!r}")


def _trace_from_csv(text: str, path) -> ExperimentTrace:
    lines = text.splitlines()
    meta, k = {}, 0
    while k < len(lines) and lines[k].startswith("#"):
        key, _, value = lines[k][1:].strip().partition("=")
        meta[key] = json.loads(value)
        k += 1
    _check_version(meta.pop("schema_version", None), path)
    reader = csv.reader(lines[k:])
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise TraceError(f"{path}: unexpected header {header}")
    rows = [{c: _parse(c, v) for c, v in zip(header, rec)} for rec in reader if rec]
    return ExperimentTrace.from_rows(rows, meta)


def _trace_from_json(text: str, path) -> ExperimentTrace:
    doc = json.loads(text)
    _check_version(doc.get("schema_version"), path)
    if tuple(doc["columns"]) != TRACE_COLUMNS:
        raise TraceError(f"{path}: unexpected columns {doc['columns']}")
    rows = [dict(zip(TRACE_COLUMNS, rec)) for rec in doc["rows"]]
    return ExperimentTrace.from_rows(rows, doc.get("metadata", {}))


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateSeries:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: int


def aggregate(traces: list[ExperimentTrace], metric: str) -> AggregateSeries:
    """Pointwise mean and sample std (n - 1) of ``metric`` across traces."""
    if not traces:
        raise TraceError("no traces to aggregate")
    if metric not in TRACE_COLUMNS:
        raise TraceError(f"unknown metric {metric!r}")
    steps = np.asarray(traces[0]["step"])
    for t in traces[1:]:
        if len(t) != len(steps) or not np.array_equal(t["step"], steps):
            raise TraceError("traces are not aligned on step indices")
    values = np.stack([np.asarray(t[metric], dtype=float) for t in traces])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1) if len(traces) > 1 else np.zeros_like(mean)
    return AggregateSeries(steps.copy(), mean, std, len(traces))


def smooth(series, window: int = 50) -> np.ndarray:
    """Centered moving average; windows are truncated at the series ends."""
    x = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1 or len(x) == 0:
        return x.copy()
    half_lo = (window - 1) // 2
    half_hi = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - half_lo, 0)
    hi = np.minimum(idx + half_hi + 1, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


def first_crossing(series, threshold: float, window: int = 50, steps=None) -> int | None:
    """First step whose smoothed value is at or below ``threshold``; None if never."""
    s = smooth(series, window)
    hits = np.flatnonzero(s <= threshold)
    if len(hits) == 0:
        return None
    steps = np.arange(1, len(s) + 1) if steps is None else np.asarray(steps)
    return int(steps[hits[0]])


@dataclass(frozen=True)
class SampleEfficiency:
    steps_a: int | None
    steps_b: int | None
    ratio: float | None

    @property
    def reached(self) -> bool:
        return self.steps_a is not None and self.steps_b is not None


def sample_efficiency(series_a, series_b, threshold: float, window: int = 50,
                      steps_a=None, steps_b=None) -> SampleEfficiency:
    """Steps each smoothed series needs to reach ``threshold`` and their ratio a / b."""
    sa = first_crossing(series_a, threshold, window, steps_a)
    sb = first_crossing(series_b, threshold, window, steps_b)
    ratio = sa / sb if sa is not None and sb is not None and sb > 0 else None
    return SampleEfficiency(sa, sb, ratio)


def common_threshold(series_a, series_b, window: int = 50, quantile: float = 0.5) -> float:
    """A threshold both smoothed series reach: between the larger of the two minima and the start."""
    a, b = smooth(series_a, window), smooth(series_b, window)
    floor = max(a.min(), b.min())
    ceiling = min(a[0], b[0])
    if ceiling <= floor:
        return float(floor)
    return float(floor + quantile * (ceiling - floor))
