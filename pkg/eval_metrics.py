"""
Per-state RMSE / MAPE with the low-volume filter, plus the historical-average
and persistence baselines.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DataError
from grid_ingest import STATES, FrameSeries

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 10.0


def state_names(k: int) -> Tuple[str, ...]:
    return STATES if k == len(STATES) else tuple(f"state{i}" for i in range(k))


@dataclass
class StateMetrics:
    state: str
    rmse: Optional[float]
    mape: Optional[float]
    evaluated: int
    filtered: int


@dataclass
class MetricsReport:
    model: str
    slot_range: Tuple[int, int]
    threshold: float
    states: List[StateMetrics] = field(default_factory=list)

    def state(self, name: str) -> StateMetrics:
        for s in self.states:
            if s.state == name:
                return s
        raise KeyError(name)

    def rows(self) -> List[Dict]:
        return [{"model": self.model, **asdict(s)} for s in self.states]


def evaluate(preds: np.ndarray, truths: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
             slot_range: Optional[Tuple[int, int]] = None, model: str = "pan") -> MetricsReport:
    """Metrics over raw-count frames shaped (n_slots, I, J, K).

    Samples whose true count is below `threshold` are excluded; averages run
    over the retained samples. MAPE also skips retained zero truths. A metric
    with nothing to average over is None.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.ndim != 4:
        raise ConfigurationError(f"predictions {preds.shape} and truths {truths.shape} must be aligned (T, I, J, K)")
    if slot_range is None:
        slot_range = (0, preds.shape[0])
    report = MetricsReport(model=model, slot_range=tuple(slot_range), threshold=float(threshold))
    for k, name in enumerate(state_names(preds.shape[3])):
        p = preds[..., k].ravel()
        d = truths[..., k].ravel()
        keep = d >= threshold
        evaluated = int(keep.sum())
        rmse = float(np.sqrt(np.mean((p[keep] - d[keep]) ** 2))) if evaluated else None
        nonzero = keep & (d != 0)
        mape = float(np.mean(np.abs(p[nonzero] - d[nonzero]) / d[nonzero])) if nonzero.any() else None
        report.states.append(StateMetrics(name, rmse, mape, evaluated, d.size - evaluated))
    return report


def baseline_ha(train: FrameSeries, slots: Sequence[int], slots_per_week: int) -> np.ndarray:
    """Mean of the training frames sharing each slot's slot-of-week, per cell and state."""
    if len(train) == 0:
        raise DataError("historical average needs at least one training frame")
    if len(train) < slots_per_week:
        logger.warning(f"Historical average built from {len(train)} frames, less than one week ({slots_per_week})")
    counts = train.counts.astype(np.float64)
    phase = np.arange(train.first_slot, train.end_slot) % slots_per_week
    global_mean = counts.mean(axis=0)

    buckets: Dict[int, np.ndarray] = {}
    preds = []
    for slot in slots:
        b = slot % slots_per_week
        if b not in buckets:
            members = phase == b
            if members.any():
                buckets[b] = counts[members].mean(axis=0)
            else:
                logger.warning(f"Slot-of-week {b} has no training frames; using the global training mean")
                buckets[b] = global_mean
        preds.append(buckets[b])
    if not preds:
        return np.zeros((0,) + counts.shape[1:])
    return np.stack(preds)


def baseline_persistence(series: FrameSeries, slots: Sequence[int]) -> np.ndarray:
    """Predict frame s with the observed frame s - 1."""
    if not len(slots):
        return np.zeros((0,) + series.counts.shape[1:])
    return np.stack([series.frame(s - 1).counts for s in slots]).astype(np.float64)


def report_rows(reports: Sequence[MetricsReport]) -> List[Dict]:
    return [row for r in reports for row in r.rows()]


def write_report(path: str, run: Dict, reports: Sequence[MetricsReport]) -> None:
    payload = {"run": run, "rows": report_rows(reports)}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote metrics for {len(reports)} models to {path}")
