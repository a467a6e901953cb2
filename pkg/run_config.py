"""
Run configuration: JSON file validated by pydantic, layered as
full-scale defaults -> --scale preset -> config file -> --seed.
Environment knobs come from .env / process env via python-dotenv.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError

load_dotenv()

logger = logging.getLogger(__name__)

# Temporal frame of the two public NYC datasets (60 days, first 40 train)
DATASET_ORIGINS = {
    "taxi_nyc": "2015-01-01T00:00:00Z",
    "bike_nyc": "2016-07-01T00:00:00Z",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Section):
    dataset: Literal["taxi_nyc", "bike_nyc", "custom"] = "taxi_nyc"
    lat_min: float = 40.70
    lat_max: float = 40.88
    lon_min: float = -74.02
    lon_max: float = -73.91
    rows: int = Field(10, ge=1)
    cols: int = Field(20, ge=1)
    slot_minutes: int = Field(30, ge=1)
    origin: Optional[str] = None
    num_days: int = Field(60, ge=1)
    train_days: int = Field(40, ge=1)

    @model_validator(mode="after")
    def _resolve(self):
        if 1440 % self.slot_minutes:
            raise ValueError(f"slot_minutes={self.slot_minutes} does not divide a day")
        if self.origin is None:
            if self.dataset == "custom":
                raise ValueError("a custom dataset needs an explicit origin timestamp")
            self.origin = DATASET_ORIGINS[self.dataset]
        if self.train_days >= self.num_days:
            raise ValueError(f"train_days={self.train_days} leaves no test days out of {self.num_days}")
        return self

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.slot_minutes

    @property
    def boundary_slot(self) -> int:
        return self.train_days * self.slots_per_day


class WindowSettings(_Section):
    n_r: int = Field(5, ge=1)
    n_d: int = Field(2, ge=0)
    n_w: int = Field(1, ge=0)


class ModelConfig(_Section):
    pasti_count: int = Field(10, ge=0)
    n0: int = Field(1, ge=0)
    n1: int = Field(4, ge=0)
    n2: int = Field(4, ge=0)
    c0: int = Field(256, ge=1)
    c1: int = Field(16, ge=1)
    c2: int = Field(16, ge=1)
    c_f: int = Field(256, ge=1)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    variant: Literal["full", "no_pac", "one_pac"] = "full"
    input_pe: bool = False
    pe_fusion: Literal["sum", "mul", "concat"] = "sum"
    merge_init: Literal["he", "zero"] = "he"
    head_init: Literal["he", "zero"] = "zero"

    @model_validator(mode="after")
    def _width(self):
        if self.n0 + self.n1 + self.n2 < 1:
            raise ValueError("a PASTI block needs at least one PAC (n0 + n1 + n2 >= 1)")
        return self

    @property
    def concat_width(self) -> int:
        return self.n0 * self.c0 + self.n1 * self.c1 + self.n2 * self.c2


class TrainConfig(_Section):
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-5, ge=0.0)
    epochs: int = Field(100, ge=0)
    seed: int = 0


class EvalConfig(_Section):
    threshold: float = 10.0
    batch_size: int = Field(64, ge=1)


class PathsConfig(_Section):
    trips_csv: str = "data/trips.csv"
    run_root: Optional[str] = None
    archive: Optional[str] = None
    checkpoint: Optional[str] = None
    report: Optional[str] = None


class RunConfig(_Section):
    grid: GridConfig = GridConfig()
    window: WindowSettings = WindowSettings()
    model: ModelConfig = ModelConfig()
    training: TrainConfig = TrainConfig()
    evaluation: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()


SCALE_PRESETS: Dict[str, Dict[str, Any]] = {
    "paper": {},
    "desk": {
        "grid": {"rows": 4, "cols": 6},
        "window": {"n_r": 3, "n_d": 1, "n_w": 1},
        "model": {"pasti_count": 2, "c_f": 16, "c0": 16, "c1": 4, "c2": 4, "n1": 2, "n2": 2},
        "training": {"epochs": 20, "batch_size": 8, "learning_rate": 1e-3},
    },
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, scale: str = "paper",
                    seed: Optional[int] = None) -> RunConfig:
    if scale not in SCALE_PRESETS:
        raise ConfigurationError(f"unknown scale '{scale}', expected one of {sorted(SCALE_PRESETS)}")
    overrides: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                overrides = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(overrides, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
    raw = _deep_merge(SCALE_PRESETS[scale], overrides)
    if seed is not None:
        raw = _deep_merge(raw, {"training": {"seed": seed}})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {e}") from e
    logger.info(f"Loaded run config (scale={scale}, digest={config_digest(cfg)[:16]})")
    return cfg


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON of the sections that shape artifacts (not evaluation or paths)."""
    payload = json.dumps(cfg.model_dump(exclude={"evaluation", "paths"}), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def worker_count() -> int:
    """PAN_THREADS, clamped to 1..64; defaults to the CPU count capped at 8."""
    env = os.getenv("PAN_THREADS")
    try:
        workers = int(float(env)) if env not in (None, "", "none", "null") else min(os.cpu_count() or 1, 8)
    except ValueError:
        logger.warning(f"Ignoring unparsable PAN_THREADS={env!r}")
        workers = min(os.cpu_count() or 1, 8)
    return max(1, min(workers, 64))


@dataclass(frozen=True)
class RunPaths:
    run_dir: str
    trips_csv: str
    archive: str
    checkpoint: str
    report: str
    loss_trace: str
    ingest_report: str
    ablation_table: str

    def variant_checkpoint(self, variant: str) -> str:
        return os.path.join(self.run_dir, f"checkpoint_{variant}.bin")

    def variant_loss_trace(self, variant: str) -> str:
        return os.path.join(self.run_dir, f"loss_{variant}.csv")


def resolve_paths(cfg: RunConfig) -> RunPaths:
    root = cfg.paths.run_root or os.getenv("PAN_RUN_ROOT") or "runs"
    run_dir = os.path.join(root, config_digest(cfg)[:16])
    return RunPaths(
        run_dir=run_dir,
        trips_csv=cfg.paths.trips_csv,
        archive=cfg.paths.archive or os.path.join(run_dir, "frames.pangrid"),
        checkpoint=cfg.paths.checkpoint or os.path.join(run_dir, "checkpoint.bin"),
        report=cfg.paths.report or os.path.join(run_dir, "report.json"),
        loss_trace=os.path.join(run_dir, "loss_trace.csv"),
        ingest_report=os.path.join(run_dir, "ingest_report.json"),
        ablation_table=os.path.join(run_dir, "ablation.csv"),
    )
