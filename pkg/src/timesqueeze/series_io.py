"""Series loading, synthetic corpora and standardized sliding windows."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

SCALE_FLOOR = 1e-6


class DataError(ValueError):
    """Input data could not be parsed or does not satisfy a precondition."""


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    id: str = "series"
    frequency_hint: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DataError(f"series {self.id!r} must be a non-empty 1-D sequence")
        if not np.isfinite(v).all():
            raise DataError(f"series {self.id!r} contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class WindowSpec:
    context_length: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        for name in ("context_length", "horizon", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


@dataclass(frozen=True)
class StandardizedWindow:
    context: np.ndarray
    target: np.ndarray
    mean: float
    scale: float
    offset: int = 0

    def destandardize(self, values) -> np.ndarray:
        return np.asarray(values) * self.scale + self.mean


# ---------------------------------------------------------------- CSV input


def _looks_numeric(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, column: str | int | None = None) -> list[TimeSeries]:
    """Read one or all columns of a CSV file as series.

    A first row is treated as a header when any of its cells is not a number.
    ``column`` selects by header name or zero-based index; ``None`` loads every
    column.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from err
    if not rows:
        raise DataError(f"{path}: no data rows")

    header = None
    first_data_row = 1
    if not all(_looks_numeric(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_data_row = 2
    if not rows:
        raise DataError(f"{path}: header only, no data rows")
    width = len(header) if header else len(rows[0])

    if column is None:
        cols = list(range(width))
    elif isinstance(column, int) or (isinstance(column, str) and column.isdigit()):
        cols = [int(column)]
    elif header and column in header:
        cols = [header.index(column)]
    else:
        raise DataError(f"{path}: no column named {column!r}")
    for c in cols:
        if not 0 <= c < width:
            raise DataError(f"{path}: column index {c} out of range (width {width})")

    out = []
    for c in cols:
        values = np.empty(len(rows))
        for r, row in enumerate(rows):
            cell = row[c].strip() if c < len(row) else ""
            try:
                values[r] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: unparseable cell {cell!r} at row {r + first_data_row}, column {c}"
                ) from None
            if not np.isfinite(values[r]):
                raise DataError(
                    f"{path}: non-finite cell {cell!r} at row {r + first_data_row}, column {c}"
                )
        name = header[c] if header else f"{path.stem}[{c}]"
        out.append(TimeSeries(values, id=name))
    return out


def save_csv(path, columns: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- synthesis

_SYNTH_DEFAULTS = {
    "sine_noise": {"period": 24.0, "amplitude": 1.0, "noise_std": 0.1, "phase": 0.0},
    "piecewise_bursty": {
        "cycle": 64,
        "duty": 0.35,
        "plateau_std": 0.02,
        "burst_std": 0.1,
        "burst_amplitude": 1.0,
        "amplitude_jitter": 0.5,
        "burst_period": 6.0,
        "level_drift": 0.01,
    },
    "ar1": {"coef": 0.8, "noise_std": 1.0},
}


def synth(kind: str, length: int, seed: int = 0, params: Mapping | None = None) -> TimeSeries:
    """Deterministic synthetic series.

    ``sine_noise``
        ``amplitude * sin(2 pi t / period + phase)`` plus Gaussian noise.
    ``piecewise_bursty``
        A slowly drifting level (random walk, step ``level_drift``) with noise
        ``plateau_std``.  The first ``duty`` fraction of every ``cycle`` steps
        (cycle start offset drawn from the seed) adds a burst: an oscillation of
        period ``burst_period``, amplitude ``burst_amplitude`` scaled by a
        per-burst factor in ``1 +- amplitude_jitter``, plus noise ``burst_std``.
    ``ar1``
        ``x[t] = coef * x[t-1] + noise_std * e[t]`` started at 0.
    """
    if kind not in _SYNTH_DEFAULTS:
        raise DataError(f"unknown synth kind {kind!r}; expected one of {sorted(_SYNTH_DEFAULTS)}")
    if length < 1:
        raise DataError("length must be >= 1")
    p = dict(_SYNTH_DEFAULTS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise DataError(f"unknown {kind} params: {sorted(unknown)}")
    p.update({k: float(v) for k, v in (params or {}).items()})
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)

    if kind == "sine_noise":
        if p["period"] <= 0 or p["noise_std"] < 0:
            raise DataError("sine_noise needs period > 0 and noise_std >= 0")
        x = p["amplitude"] * np.sin(2 * np.pi * t / p["period"] + p["phase"])
        if p["noise_std"] > 0:
            x = x + rng.normal(0.0, p["noise_std"], length)
    elif kind == "ar1":
        if p["noise_std"] < 0:
            raise DataError("ar1 needs noise_std >= 0")
        e = rng.normal(0.0, p["noise_std"], length)
        x = np.empty(length)
        prev = 0.0
        for i in range(length):
            prev = p["coef"] * prev + e[i]
            x[i] = prev
    else:
        cycle = int(p["cycle"])
        if cycle < 1 or not 0 <= p["duty"] <= 1 or p["burst_period"] <= 0:
            raise DataError("piecewise_bursty needs cycle >= 1, 0 <= duty <= 1, burst_period > 0")
        if min(p["plateau_std"], p["burst_std"], p["level_drift"], p["amplitude_jitter"]) < 0:
            raise DataError("piecewise_bursty spreads must be non-negative")
        offset = int(rng.integers(cycle))
        level = np.cumsum(rng.normal(0.0, p["level_drift"], length))
        phase_in_cycle = (t + offset) % cycle
        burst = phase_in_cycle < p["duty"] * cycle
        n_cycles = (length + offset) // cycle + 1
        amp = p["burst_amplitude"] * (1.0 + rng.uniform(-1.0, 1.0, n_cycles) * p["amplitude_jitter"])
        amp_t = amp[(t.astype(np.int64) + offset) // cycle]
        osc = amp_t * np.sin(2 * np.pi * phase_in_cycle / p["burst_period"])
        noise = np.where(burst, rng.normal(0.0, p["burst_std"], length) if p["burst_std"] > 0 else 0.0,
                         rng.normal(0.0, p["plateau_std"], length) if p["plateau_std"] > 0 else 0.0)
        x = level + np.where(burst, osc, 0.0) + noise
    return TimeSeries(x, id=f"{kind}-{seed}")


# ------------------------------------------------------------------ windows


def standardize(context, floor: float = SCALE_FLOOR) -> tuple[np.ndarray, float, float]:
    context = np.asarray(context, dtype=np.float64)
    mu = float(context.mean())
    scale = max(float(context.std()), floor)
    return (context - mu) / scale, mu, scale


def num_windows(length: int, spec: WindowSpec) -> int:
    return (length - spec.context_length - spec.horizon) // spec.stride + 1


def make_windows(series: TimeSeries | np.ndarray, spec: WindowSpec) -> list[StandardizedWindow]:
    """Sliding context/target windows standardized by context statistics."""
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, np.float64)
    T, H = spec.context_length, spec.horizon
    if values.size < T + H:
        raise DataError(f"series of length {values.size} is shorter than T + H = {T + H}")
    out = []
    for k in range(num_windows(values.size, spec)):
        off = k * spec.stride
        ctx, mu, scale = standardize(values[off:off + T])
        target = (values[off + T:off + T + H] - mu) / scale
        out.append(StandardizedWindow(ctx, target, mu, scale, off))
    return out


def reference_corpus(context_length: int = 256, per_kind: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Standardized contexts from white noise and bursty series, half of each.

    Deterministic for a given seed; used as the default calibration corpus.
    """
    n = context_length * per_kind
    out = []
    for kind, params in (("ar1", {"coef": 0.0}), ("piecewise_bursty", None)):
        values = synth(kind, n, seed, params).values
        out.extend(standardize(values[i:i + context_length])[0] for i in range(0, n, context_length))
    return out
