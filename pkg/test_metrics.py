#!/usr/bin/env python3
"""
Tests for the evaluation metrics, report aggregation and lifetime recovery.
"""

import json
from functools import lru_cache

import numpy as np
import pandas as pd
import pytest

from src.datagen import DecayParams, TimeGrid, apply_poisson, build_dataset, build_mono_dataset
from src.errors import QuantizationError, ShapeError
from src.gru_model import ModelConfig, ModelKind, init_model, predict
from src.int_engine import int_infer
from src.metrics import (EngineKind, amplitude_weighted_tau, dtw, evaluate, fit_lifetime, l2_norm, lifetime_report,
                         r2, rmse, run_inference, score_curves)
from src.quant import ptq_model

PRED = np.array([0.1, 0.9, 2.2])
TRUTH = np.array([0.0, 1.0, 2.0])


def test_pointwise_metrics_hand_values():
    assert rmse(PRED, TRUTH) == pytest.approx(0.141421, abs=1e-6)
    assert r2(PRED, TRUTH) == pytest.approx(0.97)
    assert l2_norm(PRED, TRUTH) == pytest.approx(0.244949, abs=1e-6)


def test_perfect_prediction():
    assert rmse(TRUTH, TRUTH) == 0.0
    assert r2(TRUTH, TRUTH) == 1.0
    assert l2_norm(TRUTH, TRUTH) == 0.0


def test_r2_undefined_for_constant_truth():
    assert r2(np.array([1.0, 2.0]), np.ones(2)) is None


def test_metrics_reject_mismatch_and_empty():
    with pytest.raises(ShapeError):
        rmse(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        l2_norm(np.zeros(0), np.zeros(0))


def test_dtw_hand_example():
    distance = dtw(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0]))
    assert distance.raw == pytest.approx(1.0)
    assert distance.normalized == pytest.approx(0.2)


def test_dtw_properties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random(12), rng.random(12)
        assert dtw(a, b).raw == pytest.approx(dtw(b, a).raw)
        assert dtw(a, b).raw <= np.sum(np.abs(a - b)) + 1e-12
        assert dtw(a, a).raw == 0.0


def recursive_dtw(a, b):
    @lru_cache(maxsize=None)
    def cost(i, j):
        if i == 0 and j == 0:
            return 0.0
        if i == 0 or j == 0:
            return float("inf")
        return abs(a[i - 1] - b[j - 1]) + min(cost(i - 1, j - 1), cost(i - 1, j), cost(i, j - 1))
    return cost(len(a), len(b))


def test_dtw_matches_recursive_oracle():
    rng = np.random.default_rng(6)
    for _ in range(500):
        n, m = rng.integers(1, 17, size=2)
        a, b = rng.normal(size=n), rng.normal(size=m)
        assert dtw(a, b).raw == recursive_dtw(tuple(a), tuple(b))


def test_dtw_rejects_empty():
    with pytest.raises(ShapeError):
        dtw(np.zeros(0), np.ones(3))


@pytest.mark.parametrize("tau", [1.0, 0.7])
def test_fit_lifetime_exact_decay(tau):
    grid = TimeGrid.from_window(256, 10.0)
    assert fit_lifetime(np.exp(-grid.times / tau), grid) == pytest.approx(tau, rel=1e-9)


def test_fit_lifetime_on_noisy_decays():
    grid = TimeGrid.from_window(256, 10.0)
    clean = np.exp(-grid.times / 1.0)
    rng = np.random.default_rng(2)
    taus = [fit_lifetime(apply_poisson(clean, 1000, rng), grid) for _ in range(200)]
    assert np.median(taus) == pytest.approx(1.0, rel=0.1)


def test_fit_lifetime_failures():
    grid = TimeGrid.from_window(32, 10.0)
    with pytest.raises(ShapeError):
        fit_lifetime(np.zeros(32), grid)
    with pytest.raises(ShapeError):
        fit_lifetime(np.linspace(0.0, 1.0, 32), grid)
    with pytest.raises(ShapeError):
        fit_lifetime(np.ones(16), grid)


def test_amplitude_weighted_tau():
    assert amplitude_weighted_tau(DecayParams(a_r=0.5, tau1_ns=0.5, tau2_ns=1.0)) == pytest.approx(0.75)


def test_score_curves_on_identical_curves(small_dataset):
    truth = small_dataset.sfd_matrix()
    report = score_curves(truth, truth)
    agg = report.aggregates()
    assert report.n_records == len(small_dataset)
    assert agg["rmse_mean"] == 0.0 and agg["dtw_mean"] == 0.0
    assert agg["r2_mean"] == 1.0


def test_constant_truth_excluded_from_r2_aggregate():
    truths = np.array([[1.0, 0.5, 0.25], [1.0, 1.0, 1.0]])
    preds = truths + np.array([[0.0, 0.1, 0.0], [0.0, 0.0, 0.0]])
    report = score_curves(preds, truths)
    assert report.r2_excluded == 1
    assert report.aggregates()["r2_mean"] == pytest.approx(report.r2[0])
    assert report.aggregates()["rmse_std"] == pytest.approx(np.std(report.rmse))


def test_report_frame_and_files(tmp_path):
    report = score_curves(np.array([PRED, TRUTH]), np.array([TRUTH, TRUTH]), engine="int8", path="integer")
    frame = report.to_frame()
    assert frame["record"].tolist() == ["0", "1", "mean", "std"]
    assert frame.loc[2, "rmse"] == pytest.approx(0.141421 / 2, abs=1e-6)

    report.to_csv(tmp_path / "report.csv")
    again = pd.read_csv(tmp_path / "report.csv")
    assert list(again.columns) == ["record", "rmse", "r2", "l2", "dtw", "dtw_raw"]
    assert len(again) == 4

    report.save_summary(tmp_path / "summary.json")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["engine"] == "int8"
    assert summary["path"] == "integer"
    assert summary["records"] == 2
    assert "rmse_mean" in summary["aggregates"]


def test_run_inference_paths(lite_model, small_dataset):
    x = small_dataset.tpsf_matrix()
    _, tag, path = run_inference(lite_model, x, EngineKind.FLOAT)
    assert (tag, path) == ("float", "float")
    qmodel = ptq_model(lite_model, 8, small_dataset)
    _, tag, path = run_inference(qmodel, x, "int")
    assert (tag, path) == ("int8", "integer")
    _, tag, path = run_inference(qmodel, x, "float")
    assert (tag, path) == ("int8", "dequantized")


def test_evaluate_int_engine_needs_quantized_model(lite_model, small_dataset):
    with pytest.raises(QuantizationError, match="model not quantized"):
        evaluate(lite_model, small_dataset, "int")


def test_evaluate_rejects_length_mismatch(small_dataset):
    model = init_model(ModelConfig(kind=ModelKind.LITE, enc_hidden=[4], seq_len=64), 0)
    with pytest.raises(ShapeError):
        evaluate(model, small_dataset)


def test_evaluate_records_provenance(teacher_model, small_dataset):
    report = evaluate(teacher_model, small_dataset)
    assert report.n_records == len(small_dataset)
    assert report.provenance["dataset_seed"] == small_dataset.seed
    assert report.provenance["model"]["enc_hidden"] == [8, 4]


def test_lifetime_report_columns(lite_model, mono_dataset):
    frame = lifetime_report(lite_model, mono_dataset)
    assert list(frame.columns) == ["true_tau_ns", "fit_tau_ns", "error_ns"]
    assert len(frame) == len(mono_dataset)
    assert np.all(frame["true_tau_ns"] == 1.0)


def test_evaluate_empty_dataset(lite_model, small_grid):
    dataset = build_dataset(np.zeros((1, 28, 28), dtype=np.uint8), small_grid, seed=1)
    assert len(dataset) == 0
    report = evaluate(lite_model, dataset)
    assert report.n_records == 0
    assert np.isnan(report.aggregates()["rmse_mean"])
    assert len(lifetime_report(lite_model, dataset)) == 0


def test_int_engine_on_empty_batch(lite_model, small_dataset):
    qmodel = ptq_model(lite_model, 8, small_dataset)
    assert int_infer(qmodel, np.zeros((0, 32))).shape == (0, 32)
    assert predict(lite_model, np.zeros((0, 32))).shape == (0, 32)


@pytest.mark.slow
def test_desk_teacher_recovers_one_nanosecond_lifetime(desk_teacher):
    mono = build_mono_dataset(500, TimeGrid.from_window(128, 10.0), tau_ns=1.0, peak_counts=1000.0, seed=9)
    frame = lifetime_report(desk_teacher, mono)
    assert 0.85 <= frame["fit_tau_ns"].median() <= 1.15
