"""
Trip records -> per-timeslot traffic grids d(t) of shape (I, J, K),
Min-Max normalisation, the train/test split and the PANGRID1 archive.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

TRIP_COLUMNS = ["start_time", "end_time", "start_lat", "start_lon", "end_lat", "end_lon"]
TRIP_HEADER = ",".join(TRIP_COLUMNS)
STATES = ("start", "end")
ARCHIVE_MAGIC = b"PANGRID1"
ARCHIVE_HEADER_BYTES = 32
_EPOCH = pd.Timestamp("1970-01-01", tz="UTC")


def to_epoch_seconds(value) -> float:
    """Timestamp-like (ISO string, datetime, Timestamp, number) -> UTC seconds."""
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    ts = pd.Timestamp(value)
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    return (ts - _EPOCH) / pd.Timedelta(seconds=1)


@dataclass(frozen=True)
class TripRecord:
    start_time: float
    end_time: float
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int
    slot_seconds: float
    origin_time: float
    num_slots: int

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ConfigurationError(f"lat_min {self.lat_min} must be below lat_max {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise ConfigurationError(f"lon_min {self.lon_min} must be below lon_max {self.lon_max}")
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"grid needs at least one cell, got {self.rows}x{self.cols}")
        if self.slot_seconds <= 0:
            raise ConfigurationError(f"slot_seconds must be positive, got {self.slot_seconds}")
        if self.num_slots < 1:
            raise ConfigurationError(f"num_slots must be positive, got {self.num_slots}")

    @classmethod
    def from_config(cls, grid) -> "GridSpec":
        """Build from a run_config.GridConfig."""
        return cls(
            lat_min=grid.lat_min, lat_max=grid.lat_max,
            lon_min=grid.lon_min, lon_max=grid.lon_max,
            rows=grid.rows, cols=grid.cols,
            slot_seconds=grid.slot_minutes * 60.0,
            origin_time=to_epoch_seconds(grid.origin),
            num_slots=grid.num_days * grid.slots_per_day,
        )

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.num_slots, self.rows, self.cols, len(STATES))

    def slot_of(self, when) -> float:
        return (to_epoch_seconds(when) - self.origin_time) / self.slot_seconds


@dataclass(frozen=True)
class TrafficFrame:
    slot: int
    counts: np.ndarray  # (I, J, K)


@dataclass
class FrameSeries:
    """Contiguous run of frames; counts[0] is absolute slot first_slot."""

    counts: np.ndarray  # (T, I, J, K)
    first_slot: int = 0

    def __len__(self) -> int:
        return int(self.counts.shape[0])

    @property
    def end_slot(self) -> int:
        return self.first_slot + len(self)

    def frame(self, slot: int) -> TrafficFrame:
        if not self.first_slot <= slot < self.end_slot:
            raise DataError(f"slot {slot} outside series [{self.first_slot}, {self.end_slot})")
        return TrafficFrame(slot, self.counts[slot - self.first_slot])

    def frames(self) -> Iterator[TrafficFrame]:
        for offset in range(len(self)):
            yield TrafficFrame(self.first_slot + offset, self.counts[offset])


@dataclass
class IngestReport:
    rows: int = 0
    malformed: int = 0
    trips: int = 0
    counted_start: int = 0
    counted_end: int = 0
    dropped_start: int = 0
    dropped_end: int = 0

    def merge(self, other: "IngestReport") -> "IngestReport":
        return IngestReport(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)


def _event_index(times: np.ndarray, lats: np.ndarray, lons: np.ndarray,
                 spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (t, i, j) index per event plus the in-bounds mask. Half-open on every axis."""
    slots = np.floor((times - spec.origin_time) / spec.slot_seconds)
    valid = (
        (lats >= spec.lat_min) & (lats < spec.lat_max)
        & (lons >= spec.lon_min) & (lons < spec.lon_max)
        & (slots >= 0) & (slots < spec.num_slots)
    )
    rows = np.floor((lats[valid] - spec.lat_min) / (spec.lat_max - spec.lat_min) * spec.rows)
    cols = np.floor((lons[valid] - spec.lon_min) / (spec.lon_max - spec.lon_min) * spec.cols)
    rows = np.minimum(rows.astype(np.int64), spec.rows - 1)
    cols = np.minimum(cols.astype(np.int64), spec.cols - 1)
    flat = (slots[valid].astype(np.int64) * spec.rows + rows) * spec.cols + cols
    return flat, valid


def _rasterize_table(table: pd.DataFrame, spec: GridSpec) -> Tuple[np.ndarray, IngestReport]:
    """Rasterize a numeric trip table (epoch-second times, degree coordinates)."""
    cells = spec.num_slots * spec.rows * spec.cols
    counts = np.zeros((cells, len(STATES)), dtype=np.int64)
    report = IngestReport(rows=len(table), trips=len(table))
    for k, (time_col, lat_col, lon_col) in enumerate((
        ("start_time", "start_lat", "start_lon"),
        ("end_time", "end_lat", "end_lon"),
    )):
        flat, valid = _event_index(
            table[time_col].to_numpy(dtype=np.float64),
            table[lat_col].to_numpy(dtype=np.float64),
            table[lon_col].to_numpy(dtype=np.float64),
            spec,
        )
        counts[:, k] = np.bincount(flat, minlength=cells)
        counted = int(valid.sum())
        if k == 0:
            report.counted_start, report.dropped_start = counted, len(table) - counted
        else:
            report.counted_end, report.dropped_end = counted, len(table) - counted
    return counts.reshape(spec.shape), report


def _records_table(records: Iterable[TripRecord]) -> pd.DataFrame:
    rows = [asdict(r) for r in records]
    return pd.DataFrame(rows, columns=TRIP_COLUMNS, dtype=np.float64)


def _clean_chunk(chunk: pd.DataFrame) -> Tuple[pd.DataFrame, int]:
    """Parse a raw string chunk; returns (numeric table, malformed row count)."""
    table = pd.DataFrame(index=chunk.index)
    for col in ("start_time", "end_time"):
        stamps = pd.to_datetime(chunk[col], utc=True, errors="coerce", format="ISO8601")
        table[col] = (stamps - _EPOCH) / pd.Timedelta(seconds=1)
    for col in ("start_lat", "start_lon", "end_lat", "end_lon"):
        table[col] = pd.to_numeric(chunk[col], errors="coerce")
    ok = table.notna().all(axis=1) & (table["start_time"] <= table["end_time"])
    return table[ok], int((~ok).sum())


def rasterize(records: Union[Iterable[TripRecord], pd.DataFrame],
              spec: GridSpec) -> Tuple[np.ndarray, IngestReport]:
    """Count Start/End events per (slot, cell). Returns (counts (T, I, J, 2), report)."""
    table = records if isinstance(records, pd.DataFrame) else _records_table(records)
    bad = table["start_time"] > table["end_time"]
    if bad.any():
        logger.warning(f"Skipping {int(bad.sum())} trips that end before they start")
    counts, report = _rasterize_table(table[~bad], spec)
    report.rows += int(bad.sum())
    report.malformed += int(bad.sum())
    return counts, report


def read_trips_csv(path: str, chunksize: int = 200_000) -> Iterator[Tuple[pd.DataFrame, int]]:
    """Yield (numeric trip table, malformed rows) per chunk of the trip CSV."""
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            header = f.readline().rstrip("\r\n").lstrip("\ufeff")
    except OSError as e:
        raise DataError(f"cannot read trips CSV {path}: {e}") from e
    if header != TRIP_HEADER:
        raise DataError(f"trips CSV {path} header is '{header}', expected '{TRIP_HEADER}'")

    bad_lines = []

    def on_bad_line(fields):
        bad_lines.append(fields)
        return None

    reader = pd.read_csv(
        path, dtype=str, keep_default_na=False, chunksize=chunksize,
        engine="python", on_bad_lines=on_bad_line, encoding="utf-8", encoding_errors="replace",
    )
    for chunk in reader:
        table, malformed = _clean_chunk(chunk)
        malformed += len(bad_lines)
        bad_lines.clear()
        if malformed:
            logger.warning(f"Skipped {malformed} malformed trip rows in {os.path.basename(path)}")
        yield table, malformed
    if bad_lines:
        logger.warning(f"Skipped {len(bad_lines)} malformed trip rows in {os.path.basename(path)}")
        yield pd.DataFrame(columns=TRIP_COLUMNS, dtype=np.float64), len(bad_lines)


def rasterize_csv(path: str, spec: GridSpec, max_workers: int = 4,
                  chunksize: int = 200_000) -> Tuple[np.ndarray, IngestReport]:
    """Shard the CSV by chunks across worker threads and merge partial grids by addition."""
    counts = np.zeros(spec.shape, dtype=np.int64)
    report = IngestReport()
    futures = []
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        for table, malformed in read_trips_csv(path, chunksize=chunksize):
            report.rows += malformed
            report.malformed += malformed
            futures.append(executor.submit(_rasterize_table, table, spec))
        for fut in as_completed(futures):
            part, part_report = fut.result()
            counts += part
            report = report.merge(part_report)
    logger.info(
        f"Rasterized {report.trips} trips from {len(futures)} chunks "
        f"(dropped start={report.dropped_start}, end={report.dropped_end}, malformed={report.malformed})"
    )
    return counts, report


@dataclass(frozen=True)
class NormStats:
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise ConfigurationError(f"v_min {self.v_min} exceeds v_max {self.v_max}")

    @classmethod
    def from_frames(cls, counts: np.ndarray) -> "NormStats":
        """Global extrema over every cell, slot and state of the training frames."""
        if counts.size == 0:
            raise DataError("cannot compute normalisation statistics from zero frames")
        return cls(float(counts.min()), float(counts.max()))

    @property
    def degenerate(self) -> bool:
        return self.v_max == self.v_min


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Min-Max map into [0, 1], clipping values outside the training range."""
    values = np.asarray(values, dtype=np.float64)
    if stats.degenerate:
        logger.warning(f"Min-Max statistics are degenerate (v_min = v_max = {stats.v_min}); mapping to 0")
        return np.zeros_like(values)
    return np.clip((values - stats.v_min) / (stats.v_max - stats.v_min), 0.0, 1.0)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (stats.v_max - stats.v_min) + stats.v_min


def split(series: FrameSeries, boundary, spec: GridSpec) -> Tuple[FrameSeries, FrameSeries]:
    """Frames starting strictly before `boundary` train; the rest test.

    `boundary` is a timestamp (ISO string, datetime) or an absolute slot index (int).
    """
    if isinstance(boundary, (int, np.integer)):
        cut = int(boundary)
    else:
        cut = int(np.ceil(spec.slot_of(boundary)))
    if cut <= series.first_slot or cut >= series.end_slot:
        raise ConfigurationError(
            f"split boundary slot {cut} leaves an empty side of [{series.first_slot}, {series.end_slot})"
        )
    offset = cut - series.first_slot
    train = FrameSeries(series.counts[:offset], series.first_slot)
    test = FrameSeries(series.counts[offset:], cut)
    return train, test


def write_archive(path: str, counts: np.ndarray) -> None:
    """PANGRID1 header (magic, T, I, J, K as <u4, 8 reserved bytes) + <u4 counts in (t, i, j, k) order."""
    if counts.ndim != 4:
        raise ConfigurationError(f"archive counts must be (T, I, J, K), got shape {counts.shape}")
    if counts.size and (counts.min() < 0 or counts.max() > np.iinfo(np.uint32).max):
        raise DataError("archive counts must fit in unsigned 32-bit integers")
    header = ARCHIVE_MAGIC + np.array(counts.shape, dtype="<u4").tobytes() + bytes(8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(counts, dtype="<u4").tobytes())


def read_archive(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read frame archive {path}: {e}") from e
    if len(blob) < ARCHIVE_HEADER_BYTES or blob[:8] != ARCHIVE_MAGIC:
        raise DataError(f"{path} is not a PANGRID1 frame archive")
    shape = tuple(int(v) for v in np.frombuffer(blob, dtype="<u4", count=4, offset=8))
    expected = ARCHIVE_HEADER_BYTES + 4 * int(np.prod(shape))
    if len(blob) != expected:
        raise DataError(f"{path} holds {len(blob)} bytes, header promises {expected}")
    data = np.frombuffer(blob, dtype="<u4", offset=ARCHIVE_HEADER_BYTES)
    return data.astype(np.int64).reshape(shape)
