"""Ingestion, standardization, sliding windows and synthetic CNC-style series."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import container

log = logging.getLogger(__name__)

ROLES = ("feature", "label", "drop", "timestamp")
CACHE_MAGIC = b"SCVW"
CACHE_VERSION = 1

# (rows, features) of the private CNC datasets the synthetic stand-ins imitate
CNC_SHAPES = {"A": (258697, 31), "B": (310174, 43), "C": (111770, 43), "D": (602075, 37)}


class DataError(ValueError):
    pass


class EmptyInputError(DataError):
    pass


class SchemaError(DataError):
    pass


@dataclass
class Schema:
    columns: list  # [(name, role)] in declared order
    header: bool = True
    missing: tuple = ("", "?", "NA", "NaN")
    fill: str = "drop"  # or "ffill"
    delimiter: str = ","
    name: str = ""

    @property
    def label(self):
        labels = [c for c, r in self.columns if r == "label"]
        return labels[0] if labels else None


def load_schema(path) -> Schema:
    """Parse a schema file: ``column role`` lines plus ``@key value`` directives."""
    columns, opts = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("@"):
                key, _, value = line[1:].partition(" ")
                opts[key.strip()] = value.strip()
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ROLES:
                raise SchemaError(f"{path}:{lineno}: expected '<column> <role>' with role in {ROLES}")
            columns.append((parts[0], parts[1]))
    if not columns:
        raise SchemaError(f"{path}: no columns declared")
    if sum(r == "label" for _, r in columns) > 1:
        raise SchemaError(f"{path}: more than one label column")
    schema = Schema(columns=columns, name=opts.get("name", os.path.basename(str(path))))
    if "header" in opts:
        schema.header = opts["header"].lower() in ("1", "true", "yes")
    if "missing" in opts:
        schema.missing = tuple(opts["missing"].split(",")) + ("",)
    if "fill" in opts:
        if opts["fill"] not in ("drop", "ffill"):
            raise SchemaError(f"{path}: @fill must be drop or ffill")
        schema.fill = opts["fill"]
    if "delimiter" in opts:
        schema.delimiter = {"tab": "\t", "comma": ",", "space": " "}.get(opts["delimiter"], opts["delimiter"])
    return schema


@dataclass
class RawSeries:
    columns: list
    values: np.ndarray  # (N, F) float64
    labels: np.ndarray | None = None  # (N,) uint8
    dropped_rows: int = 0
    filled_cells: int = 0
    source: str = ""

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def anomaly_ratio(self) -> float | None:
        return None if self.labels is None else float(self.labels.mean())


def _numeric(col: pd.Series, name: str, missing, line_offset: int):
    text = col.astype(str).str.strip()
    is_missing = text.isin(missing)
    values = pd.to_numeric(text.where(~is_missing), errors="coerce")
    bad = values.isna() & ~is_missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"unparseable numeric value {text.iloc[row]!r} at line {row + line_offset}, column {name!r}"
        )
    return values.to_numpy(dtype=np.float64)


def _elapsed(col: pd.Series, name: str, missing, line_offset: int):
    text = col.astype(str).str.strip()
    is_missing = text.isin(missing)
    stamps = pd.to_datetime(text.where(~is_missing), errors="coerce")
    bad = stamps.isna() & ~is_missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"unparseable timestamp {text.iloc[row]!r} at line {row + line_offset}, column {name!r}")
    first = stamps.dropna().iloc[0] if stamps.notna().any() else None
    if first is None:
        return np.full(len(text), np.nan)
    return ((stamps - first).dt.total_seconds()).to_numpy(dtype=np.float64)


def ingest_csv(path, schema: Schema) -> RawSeries:
    """Read a delimited file according to ``schema``; row order is preserved."""
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if os.path.getsize(path) == 0:
        raise EmptyInputError(f"{path} is empty")
    names = [c for c, _ in schema.columns]
    try:
        df = pd.read_csv(
            path,
            sep=schema.delimiter,
            header=0 if schema.header else None,
            names=None if schema.header else names,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
        )
    except pd.errors.EmptyDataError as err:
        raise EmptyInputError(f"{path} has no data") from err
    if len(df) == 0:
        raise EmptyInputError(f"{path} has a header but no rows")
    df.columns = [str(c).strip().strip('"') for c in df.columns]
    unknown = [c for c in df.columns if c not in names]
    absent = [c for c in names if c not in df.columns]
    if unknown or absent:
        raise SchemaError(f"schema/file column mismatch: not in schema {unknown}, not in file {absent}")

    line_offset = 2 if schema.header else 1
    feats, cols = [], []
    for name, role in schema.columns:
        if role == "feature":
            feats.append(_numeric(df[name], name, schema.missing, line_offset))
            cols.append(name)
        elif role == "timestamp":
            feats.append(_elapsed(df[name], name, schema.missing, line_offset))
            cols.append(name)
    if not feats:
        raise SchemaError("schema declares no feature columns")
    values = np.column_stack(feats)

    labels = None
    if schema.label is not None:
        raw = _numeric(df[schema.label], schema.label, schema.missing, line_offset)
        known = np.isnan(raw) | np.isin(raw, (0.0, 1.0))
        if not known.all():
            row = int(np.flatnonzero(~known)[0])
            raise DataError(
                f"label value {raw[row]!r} at line {row + line_offset} is not 0/1"
            )
        labels = raw

    keep = np.ones(len(values), dtype=bool)
    filled = 0
    if schema.fill == "ffill":
        frame = pd.DataFrame(values)
        filled = int(frame.isna().to_numpy().sum())
        values = frame.ffill().bfill().to_numpy()
    keep &= ~np.isnan(values).any(axis=1)
    if labels is not None:
        keep &= ~np.isnan(labels)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    values = values[keep]
    if labels is not None:
        labels = labels[keep].astype(np.uint8)
    if len(values) == 0:
        raise EmptyInputError(f"{path}: no complete rows")
    return RawSeries(cols, values, labels, dropped, filled, str(path))


@dataclass
class Standardizer:
    columns: list
    mean: np.ndarray
    std: np.ndarray
    dropped: list = field(default_factory=list)

    def transform(self, series: RawSeries) -> RawSeries:
        idx = [series.columns.index(c) for c in self.columns]
        vals = (series.values[:, idx] - self.mean) / self.std
        return RawSeries(list(self.columns), vals, series.labels, series.dropped_rows,
                         series.filled_cells, series.source)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def standardize(series: RawSeries):
    """Global per-feature z-score (population std). Constant columns are dropped."""
    mean = series.values.mean(axis=0)
    std = series.values.std(axis=0)
    scale = np.maximum(np.abs(mean), 1.0)
    keep = std > 1e-12 * scale
    dropped = [c for c, k in zip(series.columns, keep) if not k]
    if dropped:
        log.warning("dropping %d zero-variance feature(s): %s", len(dropped), dropped)
    if not keep.any():
        raise DataError("every feature has zero variance")
    cols = [c for c, k in zip(series.columns, keep) if k]
    std_ = Standardizer(cols, mean[keep], std[keep], dropped)
    return std_.transform(series), std_


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (n, tw, F)
    labels: np.ndarray | None
    tw: int
    stride: int = 1
    columns: list = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.windows)

    @property
    def num_features(self) -> int:
        return self.windows.shape[2]

    def flat(self) -> np.ndarray:
        return self.windows.reshape(len(self.windows), -1)


def window_labels(row_labels, tw: int, stride: int = 1) -> np.ndarray:
    """A window is anomalous iff any row it covers is."""
    row_labels = np.asarray(row_labels)
    cs = np.concatenate([[0], np.cumsum(row_labels > 0)])
    starts = np.arange(0, len(row_labels) - tw + 1, stride)
    return ((cs[starts + tw] - cs[starts]) > 0).astype(np.uint8)


def make_windows(series: RawSeries, tw: int, stride: int = 1, standardizer: Standardizer | None = None,
                 provenance: dict | None = None) -> WindowedDataset:
    n = series.n_rows
    if tw < 1 or stride < 1:
        raise DataError(f"tw and stride must be positive, got {tw}, {stride}")
    if n < tw:
        raise DataError(f"series has {n} rows, fewer than the window length {tw}")
    view = np.lib.stride_tricks.sliding_window_view(series.values, tw, axis=0)
    windows = np.ascontiguousarray(view[::stride].transpose(0, 2, 1))
    labels = None if series.labels is None else window_labels(series.labels, tw, stride)
    return WindowedDataset(
        windows,
        labels,
        tw,
        stride,
        list(series.columns),
        None if standardizer is None else standardizer.mean,
        None if standardizer is None else standardizer.std,
        dict(provenance or {"source": series.source}),
    )


def prepare(series: RawSeries, tw: int, stride: int = 1, provenance: dict | None = None) -> WindowedDataset:
    std_series, scaler = standardize(series)
    return make_windows(std_series, tw, stride, scaler, provenance)


# ---------------------------------------------------------------------------
# synthetic CNC-style data
# ---------------------------------------------------------------------------

EVENT_KINDS = ("level_shift", "variance_burst", "correlation_break")


def synth_cnc(n_rows: int, n_features: int, anomaly_ratio: float, seed: int | list[int] = 0,
              min_event: int = 20, max_event: int = 60) -> RawSeries:
    """Multichannel autoregressive signals with labelled anomalous segments.

    Channels mix a few shared AR(1) factors with a machining-cycle sinusoid
    and channel noise. Anomalous segments are level shifts, variance bursts
    or correlation breaks (factor loadings flipped) on a random channel
    subset. Exactly ``round(anomaly_ratio * n_rows)`` rows are labelled.
    """
    if not 0.0 < anomaly_ratio < 0.5:
        raise DataError(f"anomaly_ratio must lie in (0, 0.5), got {anomaly_ratio}")
    target = int(round(anomaly_ratio * n_rows))
    if target < 1:
        raise DataError("anomaly_ratio * n_rows rounds to zero anomalous rows; need at least one event")
    rng = np.random.default_rng(seed)
    k = max(2, min(4, n_features // 8))
    phi = rng.uniform(0.85, 0.98, size=k)
    factors = np.zeros((n_rows, k))
    shocks = rng.standard_normal((n_rows, k))
    for t in range(1, n_rows):
        factors[t] = phi * factors[t - 1] + np.sqrt(1 - phi**2) * shocks[t]
    loadings = rng.normal(0.0, 1.0, size=(k, n_features))
    period = rng.uniform(40, 120)
    phase = rng.uniform(0, 2 * np.pi, size=n_features)
    amp = rng.uniform(0.2, 1.0, size=n_features)
    t_axis = np.arange(n_rows)[:, None]
    cycle = amp * np.sin(2 * np.pi * t_axis / period + phase)
    noise_scale = rng.uniform(0.2, 0.5, size=n_features)
    noise = rng.standard_normal((n_rows, n_features)) * noise_scale
    values = factors @ loadings + cycle + noise
    base_std = values.std(axis=0)

    labels = np.zeros(n_rows, dtype=np.uint8)
    remaining = target
    attempts = 0
    while remaining > 0:
        attempts += 1
        if attempts > 100 * n_rows:
            raise DataError("could not place anomalous segments; lower anomaly_ratio")
        length = min(int(rng.integers(min_event, max_event + 1)), remaining, n_rows)
        start = int(rng.integers(0, n_rows - length + 1))
        lo, hi = max(0, start - 1), min(n_rows, start + length + 1)
        if labels[lo:hi].any():
            continue
        seg = slice(start, start + length)
        chans = rng.choice(n_features, size=max(1, n_features // 4), replace=False)
        kind = EVENT_KINDS[int(rng.integers(len(EVENT_KINDS)))]
        if kind == "level_shift":
            sign = rng.choice([-1.0, 1.0], size=len(chans))
            values[seg, chans] += sign * 3.0 * base_std[chans]
        elif kind == "variance_burst":
            values[seg, chans] += rng.standard_normal((length, len(chans))) * 3.0 * base_std[chans]
        else:
            values[seg, chans] -= 2.0 * (factors[seg] @ loadings[:, chans])
        labels[seg] = 1
        remaining -= length
    cols = [f"ch{i:02d}" for i in range(n_features)]
    return RawSeries(cols, values, labels, 0, 0, f"synth_cnc(n={n_rows},f={n_features},seed={seed})")


def cnc_standin(name: str, scale: float = 0.02, anomaly_ratio: float = 0.05, seed: int = 0,
                min_event: int = 4, max_event: int = 16) -> RawSeries:
    """Synthetic stand-in for CNC dataset A-D with the original feature count and scaled rows.

    Events are shorter than the :func:`synth_cnc` default so that a scaled-down
    series still carries several of them.
    """
    try:
        rows, feats = CNC_SHAPES[name.upper()]
    except KeyError:
        raise DataError(f"unknown CNC stand-in {name!r}; expected one of {sorted(CNC_SHAPES)}")
    n = max(200, int(math.ceil(rows * scale)))
    # the letter joins the seed so stand-ins of equal shape (B and C) still differ
    series = synth_cnc(n, feats, anomaly_ratio, seed=[seed, ord(name.upper())], min_event=min_event,
                       max_event=max_event)
    series.source = f"synthetic CNC {name.upper()} stand-in (rows={n}, scale={scale}, seed={seed})"
    return series


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------


def save_windowed(ds: WindowedDataset, path) -> int:
    meta = {
        "tw": ds.tw,
        "stride": ds.stride,
        "columns": ds.columns,
        "provenance": ds.provenance,
        "has_labels": ds.labels is not None,
        "has_scaler": ds.mean is not None,
    }
    tensors = [("windows", ds.windows.astype(np.float64))]
    if ds.labels is not None:
        tensors.append(("labels", ds.labels.astype(np.uint8)))
    if ds.mean is not None:
        tensors += [("mean", np.asarray(ds.mean, dtype=np.float64)), ("std", np.asarray(ds.std, dtype=np.float64))]
    data = container.pack(CACHE_MAGIC, CACHE_VERSION, json.dumps(meta, sort_keys=True), tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def load_windowed(path) -> WindowedDataset:
    with open(path, "rb") as fh:
        text, tensors = container.unpack(fh.read(), CACHE_MAGIC, CACHE_VERSION)
    meta = json.loads(text)
    return WindowedDataset(
        tensors["windows"],
        tensors.get("labels"),
        meta["tw"],
        meta["stride"],
        meta["columns"],
        tensors.get("mean"),
        tensors.get("std"),
        meta["provenance"],
    )
