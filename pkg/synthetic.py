"""
Deterministic synthetic traffic for fixtures and desk-scale runs.

Count generators return (T, I, J, K) arrays; `counts_to_trips` turns counts
into a trip table whose rasterization gives the same counts back.
"""

import logging
import os

import numpy as np
import pandas as pd

from errors import ConfigurationError
from grid_ingest import TRIP_COLUMNS, GridSpec

logger = logging.getLogger(__name__)

PATTERNS = ("daily_periodic", "weekly_periodic", "position_cycle", "uniform_trips")


def _periodic(period: int, num_slots: int, rows: int, cols: int, states: int,
              low: int, high: int, seed: int) -> np.ndarray:
    if period < 1 or num_slots < 1:
        raise ConfigurationError(f"period and slot count must be positive (period={period}, slots={num_slots})")
    rng = np.random.default_rng(seed)
    profile = rng.integers(low, high + 1, size=(period, rows, cols, states))
    return profile[np.arange(num_slots) % period]


def daily_periodic(rows: int, cols: int, slots_per_day: int, days: int, states: int = 2,
                   low: int = 0, high: int = 40, seed: int = 0) -> np.ndarray:
    """Every cell repeats one random integer day profile."""
    return _periodic(slots_per_day, slots_per_day * days, rows, cols, states, low, high, seed)


def weekly_periodic(rows: int, cols: int, slots_per_day: int, weeks: int, states: int = 2,
                    low: int = 0, high: int = 40, seed: int = 0) -> np.ndarray:
    return _periodic(7 * slots_per_day, 7 * slots_per_day * weeks, rows, cols, states, low, high, seed)


def position_cycle(rows: int, cols: int, num_slots: int, states: int = 2,
                   low: int = 10, mid: int = 20, high: int = 30) -> np.ndarray:
    """Checkerboard whose two colours swing in anti-phase around `mid`.

    Every cell shows `mid` on odd slots. On even slots one colour drops to
    `low` and the other rises to `high`, so equal values move to different
    futures and only position tells them apart.
    """
    if not low <= mid <= high:
        raise ConfigurationError(f"levels must satisfy low <= mid <= high (got {low}, {mid}, {high})")
    swing = (np.arange(num_slots) % 2 == 0).astype(np.int64)
    parity = (np.add.outer(np.arange(rows), np.arange(cols)) % 2).astype(bool)
    offset = np.where(parity, high - mid, low - mid)
    grid = mid + swing[:, None, None] * offset[np.newaxis]
    return np.repeat(grid[..., np.newaxis], states, axis=3)


def random_walk(rows: int, cols: int, num_slots: int, states: int = 2, start: float = 1000.0,
                step_std: float = 5.0, seed: int = 0) -> np.ndarray:
    """Float-valued Gaussian random walk per cell and state."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, step_std, size=(num_slots, rows, cols, states))
    steps[0] = 0.0
    return start + np.cumsum(steps, axis=0)


def uniform_trips(count: int, spec: GridSpec, outside: float = 0.1, seed: int = 0) -> pd.DataFrame:
    """Numeric trip table (epoch-second times) spread over the spec's window.

    Roughly `outside` of all coordinates and times fall outside the grid.
    """
    rng = np.random.default_rng(seed)
    lat_span = spec.lat_max - spec.lat_min
    lon_span = spec.lon_max - spec.lon_min
    duration = spec.num_slots * spec.slot_seconds
    pad = outside / (2.0 * (1.0 - outside)) if outside < 1.0 else 1.0

    def spread(low, span, size):
        return rng.uniform(low - pad * span, low + span + pad * span, size)

    start = spread(spec.origin_time, duration, count)
    end = start + rng.uniform(0.0, 3.0 * spec.slot_seconds, count)
    return pd.DataFrame({
        "start_time": start,
        "end_time": end,
        "start_lat": spread(spec.lat_min, lat_span, count),
        "start_lon": spread(spec.lon_min, lon_span, count),
        "end_lat": spread(spec.lat_min, lat_span, count),
        "end_lon": spread(spec.lon_min, lon_span, count),
    }, columns=TRIP_COLUMNS)


def _format_times(seconds: np.ndarray) -> np.ndarray:
    stamps = pd.to_datetime(seconds, unit="s", utc=True)
    return np.asarray(stamps.strftime("%Y-%m-%dT%H:%M:%SZ"))


def counts_to_trips(counts: np.ndarray, spec: GridSpec) -> pd.DataFrame:
    """Trip table (ISO timestamps) that rasterizes back to `counts`.

    Trips start and end at cell centres in the middle of their slot. Events
    without a partner of the other state pair with a coordinate outside the
    grid, so they are dropped for that state only.
    """
    counts = np.asarray(counts)
    if counts.ndim != 4 or counts.shape[1:3] != (spec.rows, spec.cols):
        raise ConfigurationError(f"counts {counts.shape} do not fit a {spec.rows}x{spec.cols} grid")
    if counts.shape[0] > spec.num_slots:
        raise ConfigurationError(f"{counts.shape[0]} slots of counts exceed the grid's {spec.num_slots}")
    if counts.size and counts.min() < 0:
        raise ConfigurationError("trip counts must be non-negative")
    counts = np.rint(counts).astype(np.int64)
    starts = counts[..., 0]
    ends = counts[..., 1] if counts.shape[3] > 1 else counts[..., 0]

    t, i, j = np.indices(starts.shape)
    t, i, j = t.ravel(), i.ravel(), j.ravel()
    mid = spec.origin_time + (t + 0.5) * spec.slot_seconds
    lat = spec.lat_min + (i + 0.5) * (spec.lat_max - spec.lat_min) / spec.rows
    lon = spec.lon_min + (j + 0.5) * (spec.lon_max - spec.lon_min) / spec.cols
    off_lat = spec.lat_max + 1.0

    paired = np.minimum(starts, ends).ravel()
    only_start = (starts - np.minimum(starts, ends)).ravel()
    only_end = (ends - np.minimum(starts, ends)).ravel()

    parts = []
    for reps, start_lat, end_lat in (
        (paired, lat, lat),
        (only_start, lat, np.full_like(lat, off_lat)),
        (only_end, np.full_like(lat, off_lat), lat),
    ):
        when = np.repeat(mid, reps)
        parts.append(pd.DataFrame({
            "start_time": when,
            "end_time": when,
            "start_lat": np.repeat(start_lat, reps),
            "start_lon": np.repeat(lon, reps),
            "end_lat": np.repeat(end_lat, reps),
            "end_lon": np.repeat(lon, reps),
        }, columns=TRIP_COLUMNS))
    trips = pd.concat(parts, ignore_index=True)
    stamps = _format_times(trips["start_time"].to_numpy())
    trips["start_time"] = stamps
    trips["end_time"] = stamps
    logger.info(f"Generated {len(trips)} trips for {int(paired.sum() + only_start.sum())} start events")
    return trips


def write_trips_csv(path: str, trips: pd.DataFrame) -> None:
    """Write the trip CSV; numeric epoch-second times are floored to whole seconds."""
    table = trips.copy()
    for col in ("start_time", "end_time"):
        if pd.api.types.is_numeric_dtype(table[col]):
            table[col] = _format_times(np.floor(table[col].to_numpy(dtype=np.float64)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    table.to_csv(path, columns=TRIP_COLUMNS, index=False)
    logger.info(f"Wrote {len(table)} trips to {path}")
