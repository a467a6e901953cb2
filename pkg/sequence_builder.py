"""
Builds the model input from recent, daily and weekly lookback windows and
enumerates the timeslots that can serve as training or evaluation targets.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DataError, WindowRangeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowConfig:
    n_r: int
    n_d: int
    n_w: int
    slots_per_day: int

    def __post_init__(self):
        if self.n_r < 1 or self.n_d < 0 or self.n_w < 0:
            raise ConfigurationError(f"invalid window counts n_r={self.n_r}, n_d={self.n_d}, n_w={self.n_w}")
        if self.slots_per_day < 1:
            raise ConfigurationError(f"slots_per_day must be positive, got {self.slots_per_day}")
        # a periodic run reaches n_r slots past its anchor; it must stay at or before t
        if (self.n_d or self.n_w) and self.slots_per_day < self.n_r:
            raise ConfigurationError(
                f"n_r={self.n_r} exceeds slots_per_day={self.slots_per_day}; periodic windows would read the future"
            )

    @classmethod
    def from_settings(cls, window, grid) -> "WindowConfig":
        return cls(window.n_r, window.n_d, window.n_w, grid.slots_per_day)

    @property
    def slots_per_week(self) -> int:
        return 7 * self.slots_per_day

    @property
    def plan_length(self) -> int:
        return self.n_r + 2 * self.n_r * self.n_d + 2 * self.n_r * self.n_w

    def input_channels(self, states: int) -> int:
        return self.plan_length * states


@dataclass(frozen=True)
class WindowPlan:
    target: int
    indices: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


def earliest_valid(cfg: WindowConfig) -> int:
    """Smallest t whose deepest lookback index is >= 0."""
    reach = max(cfg.n_d * cfg.slots_per_day, cfg.n_w * cfg.slots_per_week)
    return cfg.n_r - 1 + reach


def _periodic_runs(t: int, n_r: int, count: int, period: int) -> List[int]:
    indices = []
    for q in range(1, count + 1):
        anchor = t - q * period
        indices.extend(range(anchor + n_r, anchor - n_r, -1))
    return indices


def plan_window(t: int, cfg: WindowConfig) -> WindowPlan:
    """Recent block, then daily runs (q = 1..n_d), then weekly runs, each descending."""
    minimum = earliest_valid(cfg)
    if t < minimum:
        raise WindowRangeError(t, minimum)
    indices = list(range(t, t - cfg.n_r, -1))
    indices += _periodic_runs(t, cfg.n_r, cfg.n_d, cfg.slots_per_day)
    indices += _periodic_runs(t, cfg.n_r, cfg.n_w, cfg.slots_per_week)
    return WindowPlan(target=t + 1, indices=tuple(indices))


class FrameStore:
    """Immutable store of normalised frames addressed by absolute slot."""

    def __init__(self, frames: np.ndarray, first_slot: int = 0):
        if frames.ndim != 4:
            raise ConfigurationError(f"frame store expects (T, I, J, K), got shape {frames.shape}")
        self._frames = np.array(frames, dtype=np.float64)
        self._frames.setflags(write=False)
        self.first_slot = first_slot

    @property
    def end_slot(self) -> int:
        return self.first_slot + self._frames.shape[0]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self._frames.shape[1], self._frames.shape[2]

    @property
    def states(self) -> int:
        return self._frames.shape[3]

    def frame(self, slot: int) -> np.ndarray:
        if not self.first_slot <= slot < self.end_slot:
            raise DataError(f"frame for slot {slot} is missing from the store [{self.first_slot}, {self.end_slot})")
        return self._frames[slot - self.first_slot]

    def frames(self, slots: Sequence[int]) -> np.ndarray:
        return np.stack([self.frame(s) for s in slots])


def materialize(plan: WindowPlan, store: FrameStore) -> np.ndarray:
    """Gather the plan's frames into a (1, I, J, len(plan) * K) tensor."""
    blocks = [store.frame(s) for s in plan.indices]
    return np.concatenate(blocks, axis=-1)[np.newaxis]


def materialize_batch(ts: Sequence[int], cfg: WindowConfig, store: FrameStore) -> np.ndarray:
    return np.concatenate([materialize(plan_window(t, cfg), store) for t in ts], axis=0)


def train_targets(cfg: WindowConfig, boundary_slot: int) -> List[int]:
    """Input slots t whose target t+1 and whole lookback lie before the boundary."""
    return list(range(earliest_valid(cfg), boundary_slot - 1))


def test_targets(cfg: WindowConfig, boundary_slot: int, num_slots: int) -> List[int]:
    """Input slots t whose target t+1 lies in [boundary, num_slots); lookback may reach into train."""
    return list(range(max(earliest_valid(cfg), boundary_slot - 1), num_slots - 1))
