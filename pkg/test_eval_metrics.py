"""Tests for per-state metrics, the low-volume filter and the baselines."""

import json
import logging
import math

import numpy as np
import pytest

from errors import ConfigurationError, DataError
from eval_metrics import (
    MetricsReport,
    baseline_ha,
    baseline_persistence,
    evaluate,
    state_names,
    write_report,
)
from grid_ingest import FrameSeries, NormStats, denormalize, normalize
from pan_model import build_variant, predict, train
from run_config import ModelConfig, TrainConfig
from sequence_builder import FrameStore, WindowConfig, train_targets
from synthetic import random_walk, weekly_periodic


def brute_force(preds, truths, threshold):
    """Reference metrics by explicit loops over (slot, cell) per state."""
    results = []
    for k in range(preds.shape[3]):
        sq, ape, n_sq, n_ape = 0.0, 0.0, 0, 0
        for t in range(preds.shape[0]):
            for i in range(preds.shape[1]):
                for j in range(preds.shape[2]):
                    p, d = preds[t, i, j, k], truths[t, i, j, k]
                    if d < threshold:
                        continue
                    sq += (p - d) ** 2
                    n_sq += 1
                    if d != 0:
                        ape += abs(p - d) / d
                        n_ape += 1
        results.append((math.sqrt(sq / n_sq) if n_sq else None, ape / n_ape if n_ape else None))
    return results


class TestEvaluate:
    def test_matches_brute_force(self, rng):
        for _ in range(100):
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2)
            truths = rng.integers(0, 25, size=shape).astype(np.float64)
            truths[rng.random(shape) < 0.2] = 10.0
            preds = truths + rng.normal(0.0, 3.0, size=shape)
            report = evaluate(preds, truths, 10.0)
            for metrics, (rmse, mape) in zip(report.states, brute_force(preds, truths, 10.0)):
                if rmse is None:
                    assert metrics.rmse is None
                else:
                    assert metrics.rmse == pytest.approx(rmse, rel=1e-12)
                if mape is None:
                    assert metrics.mape is None
                else:
                    assert metrics.mape == pytest.approx(mape, rel=1e-12)

    def test_single_sample(self):
        report = evaluate(np.full((1, 1, 1, 1), 110.0), np.full((1, 1, 1, 1), 100.0))
        assert report.states[0].mape == pytest.approx(0.1)
        assert report.states[0].rmse == pytest.approx(10.0)

    def test_threshold_is_inclusive(self):
        truths = np.array([9.0, 10.0, 30.0]).reshape(3, 1, 1, 1)
        preds = np.array([100.0, 12.0, 30.0]).reshape(3, 1, 1, 1)
        s = evaluate(preds, truths, 10.0).states[0]
        assert (s.evaluated, s.filtered) == (2, 1)
        assert s.rmse == pytest.approx(math.sqrt(2.0))
        assert s.mape == pytest.approx(0.1)

    def test_nothing_retained(self, rng):
        truths = rng.uniform(0, 100, size=(3, 2, 2, 2))
        report = evaluate(truths, truths, float("inf"))
        for s in report.states:
            assert s.rmse is None and s.mape is None
            assert s.evaluated == 0 and s.filtered == 12

    def test_zero_truth_skipped_by_mape_only(self):
        truths = np.array([0.0, 10.0]).reshape(2, 1, 1, 1)
        preds = np.array([3.0, 11.0]).reshape(2, 1, 1, 1)
        s = evaluate(preds, truths, 0.0).states[0]
        assert s.rmse == pytest.approx(math.sqrt(5.0))
        assert s.mape == pytest.approx(0.1)

    def test_scale_behaviour(self, rng):
        truths = rng.uniform(0, 50, size=(4, 3, 3, 2))
        preds = truths + rng.normal(0, 4, size=truths.shape)
        base = evaluate(preds, truths, 10.0)
        scaled = evaluate(7.0 * preds, 7.0 * truths, 70.0)
        for a, b in zip(base.states, scaled.states):
            assert b.mape == pytest.approx(a.mape, rel=1e-12)
            assert b.rmse == pytest.approx(7.0 * a.rmse, rel=1e-12)
            assert b.evaluated == a.evaluated

    def test_higher_threshold_retains_fewer(self, rng):
        truths = rng.uniform(0, 50, size=(5, 3, 3, 2))
        counts = [evaluate(truths, truths, thr).states[0].evaluated for thr in (0, 5, 10, 20, 40, 60)]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] == 45 and counts[-1] == 0

    def test_misaligned(self):
        with pytest.raises(ConfigurationError):
            evaluate(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 1)))

    def test_state_names(self):
        assert state_names(2) == ("start", "end")
        assert state_names(3) == ("state0", "state1", "state2")
        report = evaluate(np.full((1, 1, 1, 2), 20.0), np.full((1, 1, 1, 2), 20.0), slot_range=(5, 6))
        assert report.state("end").rmse == 0.0
        assert report.slot_range == (5, 6)
        with pytest.raises(KeyError):
            report.state("middle")


class TestBaselines:
    def test_ha_two_week_mean(self):
        slots_per_week = 4
        counts = np.arange(8 * 2 * 2 * 1).reshape(8, 2, 2, 1)
        preds = baseline_ha(FrameSeries(counts), [8, 9, 10, 11], slots_per_week)
        expected = (counts[:4] + counts[4:]) / 2.0
        np.testing.assert_array_equal(preds, expected)

    def test_ha_uses_absolute_slot_of_week(self):
        counts = np.arange(6).reshape(6, 1, 1, 1)
        series = FrameSeries(counts, first_slot=3)
        # absolute slots 3..8 with a 3-slot week: phases 0,1,2,0,1,2
        preds = baseline_ha(series, [9, 10], 3)
        assert preds.ravel().tolist() == [1.5, 2.5]

    def test_ha_constant_series(self):
        counts = np.full((10, 2, 3, 2), 7)
        np.testing.assert_array_equal(baseline_ha(FrameSeries(counts), range(10, 20), 5), np.full((10, 2, 3, 2), 7.0))

    def test_ha_empty_bucket_falls_back_to_global_mean(self, caplog):
        counts = np.array([2, 4, 6]).reshape(3, 1, 1, 1)
        with caplog.at_level(logging.WARNING):
            preds = baseline_ha(FrameSeries(counts), [3, 4], 5)
        # slot 3 has no training frame in its bucket
        assert preds.ravel().tolist() == [4.0, 4.0]
        assert "less than one week" in caplog.text
        assert "no training frames" in caplog.text

    def test_ha_needs_frames(self):
        with pytest.raises(DataError):
            baseline_ha(FrameSeries(np.zeros((0, 1, 1, 2))), [0], 4)

    def test_persistence_linear_ramp(self):
        h = 3.0
        counts = (np.arange(20) * h)[:, None, None, None] + np.zeros((1, 2, 2, 2))
        series = FrameSeries(counts)
        slots = list(range(10, 20))
        s = evaluate(baseline_persistence(series, slots), counts[slots], 0.0).states[0]
        assert s.rmse == pytest.approx(h)

    def test_persistence_needs_previous_frame(self):
        with pytest.raises(DataError):
            baseline_persistence(FrameSeries(np.zeros((4, 1, 1, 1)), first_slot=2), [2])

    def test_persistence_on_random_walk(self):
        counts = random_walk(2, 2, 400, step_std=5.0, seed=3)
        slots = list(range(1, 400))
        report = evaluate(baseline_persistence(FrameSeries(counts), slots), counts[slots], 10.0)
        for s in report.states:
            assert s.rmse == pytest.approx(5.0, rel=0.1)


def test_write_report(tmp_path):
    report = evaluate(np.full((1, 1, 1, 2), 20.0), np.full((1, 1, 1, 2), 5.0), model="ha")
    path = tmp_path / "out" / "metrics.json"
    write_report(str(path), {"seed": 0}, [report])
    payload = json.loads(path.read_text())
    assert payload["run"] == {"seed": 0}
    assert [r["state"] for r in payload["rows"]] == ["start", "end"]
    assert payload["rows"][0]["model"] == "ha"
    assert payload["rows"][0]["rmse"] is None
    assert isinstance(report, MetricsReport)


@pytest.mark.slow
def test_weekly_periodic_ranking():
    slots_per_day = 2
    counts = weekly_periodic(3, 3, slots_per_day, weeks=5, seed=4)
    boundary = 56
    series = FrameSeries(counts)
    train_series = FrameSeries(counts[:boundary])
    slots = list(range(boundary, len(counts)))
    truths = counts[slots]

    ha = evaluate(baseline_ha(train_series, slots, 7 * slots_per_day), truths)
    persistence = evaluate(baseline_persistence(series, slots), truths)

    stats = NormStats.from_frames(counts[:boundary])
    store = FrameStore(normalize(counts, stats))
    window = WindowConfig(1, 0, 1, slots_per_day)
    cfg = ModelConfig(pasti_count=2, n0=1, n1=1, n2=1, c0=4, c1=4, c2=4, c_f=8, dropout_rate=0.0)
    model = build_variant("full", cfg, 3, 3, window.input_channels(2), 2, seed=0)
    train(model, store, window, train_targets(window, boundary),
          TrainConfig(batch_size=8, learning_rate=3e-3, epochs=100), np.random.default_rng(0))
    pan = evaluate(denormalize(predict(model, store, window, [s - 1 for s in slots]), stats), truths)

    for state in ("start", "end"):
        assert ha.state(state).rmse < 1e-9
        assert pan.state(state).rmse <= 0.8 * persistence.state(state).rmse
