"""
pan: command-line entry point for ingest, train, eval, ablate and synth.

    python app.py ingest --config run.json [--scale desk|paper] [--seed N]

Every output lands in a run directory named by the config digest.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import synthetic
from checkpoint import load_checkpoint, save_checkpoint
from errors import ArtifactMismatchError, DataError, PanError
from eval_metrics import MetricsReport, baseline_ha, baseline_persistence, evaluate, write_report
from grid_ingest import (
    FrameSeries,
    GridSpec,
    NormStats,
    denormalize,
    normalize,
    rasterize_csv,
    read_archive,
    split,
    write_archive,
)
from pan_model import VARIANTS, PanModel, TrainingTrace, build_variant, predict, train
from run_config import RunConfig, RunPaths, config_digest, load_run_config, resolve_paths, worker_count
from sequence_builder import FrameStore, WindowConfig, test_targets, train_targets

load_dotenv()

logger = logging.getLogger(__name__)


@dataclass
class RunData:
    """Archive frames prepared for one run: split, normalised and windowed."""

    series: FrameSeries
    train: FrameSeries
    stats: NormStats
    store: FrameStore
    window: WindowConfig
    boundary: int

    @property
    def train_targets(self) -> List[int]:
        return train_targets(self.window, self.boundary)

    @property
    def test_targets(self) -> List[int]:
        return test_targets(self.window, self.boundary, len(self.series))


def load_run_data(cfg: RunConfig, paths: RunPaths) -> RunData:
    spec = GridSpec.from_config(cfg.grid)
    counts = read_archive(paths.archive)
    if counts.shape != spec.shape:
        raise ArtifactMismatchError(f"archive {paths.archive} has shape {counts.shape}, config expects {spec.shape}")
    series = FrameSeries(counts)
    boundary = cfg.grid.boundary_slot
    train_series, _ = split(series, boundary, spec)
    stats = NormStats.from_frames(train_series.counts)
    logger.info(f"Min-Max statistics from {len(train_series)} training frames: [{stats.v_min}, {stats.v_max}]")
    return RunData(
        series=series,
        train=train_series,
        stats=stats,
        store=FrameStore(normalize(counts, stats)),
        window=WindowConfig.from_settings(cfg.window, cfg.grid),
        boundary=boundary,
    )


def _build(cfg: RunConfig, data: RunData, variant: str, seed) -> PanModel:
    rows, cols = data.store.grid_shape
    return build_variant(
        variant, cfg.model, rows, cols,
        in_channels=data.window.input_channels(data.store.states),
        states=data.store.states,
        seed=seed,
    )


def _seeds(cfg: RunConfig):
    """Independent streams for weight init and for shuffling/dropout."""
    return np.random.SeedSequence(cfg.training.seed).spawn(2)


def _variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    return cfg.model_copy(update={"model": cfg.model.model_copy(update={"variant": variant})})


def _train_variant(cfg: RunConfig, data: RunData, variant: str) -> Tuple[PanModel, TrainingTrace]:
    init_seed, train_seed = _seeds(cfg)
    model = _build(cfg, data, variant, init_seed)
    trace = train(model, data.store, data.window, data.train_targets, cfg.training,
                  np.random.default_rng(train_seed))
    trace.variant = variant
    return model, trace


def _evaluate_model(cfg: RunConfig, data: RunData, model: PanModel, name: str) -> MetricsReport:
    targets = data.test_targets
    if not targets:
        raise DataError("no valid test targets; the test split is shorter than one slot")
    normed = predict(model, data.store, data.window, targets,
                     batch_size=cfg.evaluation.batch_size, max_workers=worker_count())
    slots = [t + 1 for t in targets]
    truths = data.series.counts[slots]
    return evaluate(denormalize(normed, data.stats), truths, cfg.evaluation.threshold,
                    slot_range=(slots[0] - 1, slots[-1]), model=name)


def _ensure_run_dir(paths: RunPaths) -> None:
    os.makedirs(paths.run_dir, exist_ok=True)


def cmd_ingest(cfg: RunConfig, paths: RunPaths) -> int:
    spec = GridSpec.from_config(cfg.grid)
    counts, report = rasterize_csv(paths.trips_csv, spec, max_workers=worker_count())
    _ensure_run_dir(paths)
    write_archive(paths.archive, counts)
    with open(paths.ingest_report, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"rows={report.rows} malformed={report.malformed} trips={report.trips}")
    print(f"start counted={report.counted_start} dropped={report.dropped_start}")
    print(f"end   counted={report.counted_end} dropped={report.dropped_end}")
    print(f"archive: {paths.archive}")
    return 0


def cmd_train(cfg: RunConfig, paths: RunPaths) -> int:
    data = load_run_data(cfg, paths)
    model, trace = _train_variant(cfg, data, cfg.model.variant)
    _ensure_run_dir(paths)
    save_checkpoint(paths.checkpoint, model, config_digest(cfg))
    trace.to_csv(paths.loss_trace)
    final = f"{trace.final:.6g}" if trace.final is not None else "n/a"
    print(f"trained {cfg.model.variant} for {len(trace.epoch_losses)} epochs, final mean loss {final}")
    print(f"checkpoint: {paths.checkpoint}")
    print(f"loss trace: {paths.loss_trace}")
    return 0


def cmd_eval(cfg: RunConfig, paths: RunPaths) -> int:
    data = load_run_data(cfg, paths)
    digest = config_digest(cfg)
    model = _build(cfg, data, cfg.model.variant, _seeds(cfg)[0])
    load_checkpoint(paths.checkpoint, model, digest)

    pan = _evaluate_model(cfg, data, model, "pan")
    slots = [t + 1 for t in data.test_targets]
    threshold = cfg.evaluation.threshold
    ha = evaluate(baseline_ha(data.train, slots, data.window.slots_per_week), data.series.counts[slots],
                  threshold, slot_range=pan.slot_range, model="ha")
    persistence = evaluate(baseline_persistence(data.series, slots), data.series.counts[slots],
                           threshold, slot_range=pan.slot_range, model="persistence")
    run = {
        "config_digest": digest,
        "variant": cfg.model.variant,
        "seed": cfg.training.seed,
        "boundary_slot": data.boundary,
        "slot_range": list(pan.slot_range),
        "threshold": threshold if np.isfinite(threshold) else str(threshold),
        "norm": {"v_min": data.stats.v_min, "v_max": data.stats.v_max},
    }
    _ensure_run_dir(paths)
    write_report(paths.report, run, [pan, ha, persistence])
    for report in (pan, ha, persistence):
        for s in report.states:
            print(f"{report.model:12s} {s.state:6s} rmse={s.rmse} mape={s.mape} "
                  f"evaluated={s.evaluated} filtered={s.filtered}")
    print(f"report: {paths.report}")
    return 0


def cmd_ablate(cfg: RunConfig, paths: RunPaths) -> int:
    data = load_run_data(cfg, paths)
    _ensure_run_dir(paths)
    rows = []
    for variant in VARIANTS:
        variant_cfg = _variant_config(cfg, variant)
        model, trace = _train_variant(variant_cfg, data, variant)
        save_checkpoint(paths.variant_checkpoint(variant), model, config_digest(variant_cfg))
        trace.to_csv(paths.variant_loss_trace(variant))
        report = _evaluate_model(variant_cfg, data, model, variant)
        rows += [{"variant": variant, "state": s.state, "rmse": s.rmse, "mape": s.mape} for s in report.states]
    table = pd.DataFrame(rows, columns=["variant", "state", "rmse", "mape"])
    table.to_csv(paths.ablation_table, index=False, float_format="%.17g")
    print(table.to_string(index=False))
    print(f"ablation table: {paths.ablation_table}")
    return 0


def cmd_synth(cfg: RunConfig, paths: RunPaths, pattern: str) -> int:
    spec = GridSpec.from_config(cfg.grid)
    num_slots, rows, cols, states = spec.shape
    seed = cfg.training.seed
    if pattern == "uniform_trips":
        trips = synthetic.uniform_trips(20 * num_slots, spec, seed=seed)
    else:
        per_day = cfg.grid.slots_per_day
        if pattern == "daily_periodic":
            counts = synthetic.daily_periodic(rows, cols, per_day, cfg.grid.num_days, states, seed=seed)
        elif pattern == "weekly_periodic":
            weeks = -(-cfg.grid.num_days // 7)
            counts = synthetic.weekly_periodic(rows, cols, per_day, weeks, states, seed=seed)[:num_slots]
        else:
            counts = synthetic.position_cycle(rows, cols, num_slots, states)
        trips = synthetic.counts_to_trips(counts, spec)
    synthetic.write_trips_csv(paths.trips_csv, trips)
    print(f"wrote {len(trips)} {pattern} trips to {paths.trips_csv}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON run configuration (defaults are the full-scale setup)")
    parser.add_argument("--scale", default="paper", choices=["paper", "desk"], help="Size preset applied before the config file")
    parser.add_argument("--seed", type=int, default=None, help="Override training.seed; runs without a seed anywhere use seed 0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pan", description="Position-aware traffic forecasting on city grids")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "Rasterize the trips CSV into a frame archive"),
        ("train", "Train the configured model variant"),
        ("eval", "Evaluate the checkpoint against HA and persistence"),
        ("ablate", "Train and evaluate full, no_pac and one_pac"),
        ("synth", "Write a synthetic trips CSV"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common(cmd)
        if name == "synth":
            cmd.add_argument("--pattern", default="daily_periodic", choices=synthetic.PATTERNS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.getenv("PAN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_run_config(args.config, scale=args.scale, seed=args.seed)
        paths = resolve_paths(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg, paths)
        if args.command == "train":
            return cmd_train(cfg, paths)
        if args.command == "eval":
            return cmd_eval(cfg, paths)
        if args.command == "ablate":
            return cmd_ablate(cfg, paths)
        return cmd_synth(cfg, paths, args.pattern)
    except PanError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"Unexpected error during {args.command}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
