#!/usr/bin/env python3
"""
Tests for synthetic data generation: decay sampling, IRFs, convolution, noise and IDX parsing.
"""

import gzip

import numpy as np
import pytest

import src.datagen as datagen

from src.datagen import (DecayParams, Irf, IrfConfig, ParamsMode, TimeGrid, apply_poisson, build_dataset,
                         convolve_irf, eval_biexp, load_idx, load_irf, parse_idx,
                         sample_decay_params, save_irf, split_dataset, synth_irf)
from src.errors import ConfigError, IdxFormatError, IrfError


def test_sampled_params_stay_in_range():
    rng = np.random.default_rng(0)
    draws = [sample_decay_params(rng) for _ in range(10000)]
    a_r = np.array([d.a_r for d in draws])
    tau1 = np.array([d.tau1_ns for d in draws])
    tau2 = np.array([d.tau2_ns for d in draws])
    assert tau1.min() >= 0.2 and tau1.max() <= 0.8
    assert tau2.min() >= 0.8 and tau2.max() <= 1.5
    assert a_r.min() >= 0.0 and a_r.max() <= 1.0
    n = len(draws)
    for values, mean, width in [(tau1, 0.5, 0.6), (tau2, 1.15, 0.7), (a_r, 0.5, 1.0)]:
        stderr = width / np.sqrt(12) / np.sqrt(n)
        assert abs(values.mean() - mean) < 4 * stderr


def test_sampling_is_seeded():
    a = [sample_decay_params(np.random.default_rng(9)) for _ in range(3)]
    b = [sample_decay_params(np.random.default_rng(9)) for _ in range(3)]
    assert a == b


def test_biexp_values(small_grid):
    params = DecayParams(a_r=0.3, tau1_ns=0.4, tau2_ns=1.2)
    assert eval_biexp(params, small_grid)[0] == pytest.approx(1.0)
    mono = DecayParams(a_r=0.0, tau1_ns=0.4, tau2_ns=1.2)
    assert np.allclose(eval_biexp(mono, small_grid), np.exp(-small_grid.times / 1.2))


def test_biexp_hand_value():
    grid = TimeGrid(n_gates=10, gate_width_ns=1.0)
    value = eval_biexp(DecayParams(a_r=0.5, tau1_ns=0.5, tau2_ns=1.0), grid)[1]
    assert value == pytest.approx(0.5 * np.exp(-2) + 0.5 * np.exp(-1), abs=1e-12)
    assert value == pytest.approx(0.25161, abs=1e-5)


def test_decay_params_validation():
    with pytest.raises(ConfigError):
        DecayParams(a_r=1.2, tau1_ns=0.4, tau2_ns=1.0).validate()
    with pytest.raises(ConfigError):
        DecayParams(a_r=0.5, tau1_ns=0.8, tau2_ns=0.8).validate()


def test_grid_rejects_short_window():
    with pytest.raises(ConfigError):
        TimeGrid.from_window(32, 4.0)
    with pytest.raises(ConfigError):
        TimeGrid.from_window(4, 10.0)


def test_synth_irf_normalized_and_centered():
    grid = TimeGrid.from_window(256, 10.0)
    irf = synth_irf(grid, fwhm_ns=0.2, center_ns=0.5)
    assert irf.samples.sum() == pytest.approx(1.0, abs=1e-12)
    assert int(np.argmax(irf.samples)) == round(0.5 / grid.gate_width_ns)


def test_synth_irf_narrow_limit_is_delta():
    grid = TimeGrid.from_window(64, 10.0)
    irf = synth_irf(grid, fwhm_ns=1e-6, center_ns=grid.gate_width_ns * 3)
    assert irf.samples[3] == pytest.approx(1.0)
    assert irf.samples.sum() == pytest.approx(1.0)


def test_synth_irf_rejects_bad_geometry(small_grid):
    with pytest.raises(IrfError):
        synth_irf(small_grid, fwhm_ns=5.0)
    with pytest.raises(IrfError):
        synth_irf(small_grid, center_ns=4.0)


def test_irf_csv_round_trip(tmp_path):
    grid = TimeGrid.from_window(256, 10.0)
    path = tmp_path / "irf.csv"
    raw = synth_irf(grid).samples * 2.0
    np.savetxt(path, raw)
    irf = load_irf(path, 256)
    assert irf.samples.sum() == pytest.approx(1.0)
    save_irf(irf, tmp_path / "copy.csv")
    again = load_irf(tmp_path / "copy.csv", 256)
    assert np.allclose(again.samples, irf.samples, atol=1e-6)


def test_irf_wrong_length_rejected(tmp_path):
    path = tmp_path / "irf.csv"
    np.savetxt(path, np.ones(10))
    with pytest.raises(IrfError):
        load_irf(path, 256)


def test_convolution_with_delta_kernels():
    sfd = np.exp(-np.arange(8) / 3.0)
    delta = np.zeros(8)
    delta[0] = 1.0
    assert np.allclose(convolve_irf(sfd, Irf(delta)), sfd / sfd.max())
    shifted = np.zeros(8)
    shifted[2] = 1.0
    out = convolve_irf(sfd, Irf(shifted), normalize=False)
    assert np.allclose(out, np.concatenate([[0, 0], sfd[:6]]))


def test_convolution_hand_example():
    out = convolve_irf(np.array([1.0, 0.5, 0.25]), Irf(np.array([0.5, 0.5, 0.0])), normalize=False)
    assert np.allclose(out, [0.5, 0.75, 0.375])


def test_poisson_noise_properties():
    rng = np.random.default_rng(0)
    clean = np.array([0.0, 0.1, 0.5, 1.0])
    samples = np.stack([apply_poisson(clean, 500, rng) for _ in range(10000)])
    assert np.all(samples[:, 0] == 0)
    bound = 4 * np.sqrt(clean / 500 / 10000)
    assert np.all(np.abs(samples.mean(axis=0) - clean) <= bound + 1e-12)
    big = apply_poisson(clean, 1e7, rng)
    assert np.max(np.abs(big - clean)) < 1e-2


def test_parse_idx_single_image(idx_bytes):
    images = parse_idx(idx_bytes(np.arange(784).reshape(1, 28, 28) % 256))
    assert images.shape == (1, 28, 28)
    assert images.dtype == np.uint8
    assert images[0, 0, 5] == 5


def test_parse_idx_rejects_label_file():
    data = (0x00000801).to_bytes(4, "big") + (3).to_bytes(4, "big") + bytes(3)
    with pytest.raises(IdxFormatError, match="expected IDX3"):
        parse_idx(data + bytes(8))


def test_parse_idx_truncated(idx_bytes):
    data = idx_bytes(np.zeros((2, 28, 28)))
    with pytest.raises(IdxFormatError):
        parse_idx(data[:-10])


def test_load_idx_gzip_round_trip(tmp_path, idx_bytes):
    images = np.random.default_rng(1).integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
    path = tmp_path / "images.idx3-ubyte.gz"
    path.write_bytes(gzip.compress(idx_bytes(images)))
    assert np.array_equal(load_idx(path), images)


def test_all_zero_image_gives_no_records(small_grid):
    dataset = build_dataset(np.zeros((1, 28, 28), dtype=np.uint8), small_grid, seed=1)
    assert len(dataset) == 0


def test_record_count_equals_nonzero_pixels(small_grid):
    image = np.zeros((28, 28), dtype=np.uint8)
    image[5:15, 5:15] = 200
    dataset = build_dataset(image, small_grid, seed=1)
    assert len(dataset) == 100


def test_records_are_consistent(small_dataset):
    for record in small_dataset.records:
        assert record.sfd[0] == pytest.approx(1.0)
        assert np.all(record.tpsf >= 0)
        assert record.tpsf.shape == (32,)


def test_worker_count_does_not_change_output(small_grid, tiny_images):
    serial = build_dataset(tiny_images, small_grid, IrfConfig(), seed=4, workers=1)
    pooled = build_dataset(tiny_images, small_grid, IrfConfig(), seed=4, workers=3)
    assert np.array_equal(serial.tpsf_matrix(), pooled.tpsf_matrix())
    assert [r.pixel_xy for r in serial.records] == [r.pixel_xy for r in pooled.records]


def test_workers_run_in_a_process_pool(small_grid, tiny_images, monkeypatch):
    pools = []

    class RecordingPool(datagen.ProcessPoolExecutor):
        def __init__(self, *args, **kwargs):
            super().__init__(*args, **kwargs)
            pools.append(kwargs.get("max_workers"))

    monkeypatch.setattr(datagen, "ProcessPoolExecutor", RecordingPool)
    dataset = build_dataset(tiny_images, small_grid, seed=4, workers=2)
    assert pools == [2]
    assert len(dataset) == np.count_nonzero(tiny_images)


def test_per_pixel_mode_draws_distinct_lifetimes(small_grid, tiny_images):
    dataset = build_dataset(tiny_images, small_grid, params_mode=ParamsMode.PER_PIXEL, seed=4)
    assert len({r.params.tau2_ns for r in dataset.records}) > 1


def test_mono_dataset_has_single_lifetime(mono_dataset):
    assert len(mono_dataset) == 80
    assert {r.params.tau2_ns for r in mono_dataset.records} == {1.0}
    assert all(r.params.a_r == 0.0 for r in mono_dataset.records)


def test_split_is_seeded_and_disjoint(mono_dataset):
    train_a, val_a = split_dataset(mono_dataset, 0.1, seed=3)
    train_b, val_b = split_dataset(mono_dataset, 0.1, seed=3)
    assert len(val_a) == 8 and len(train_a) == 72
    assert np.array_equal(val_a.tpsf_matrix(), val_b.tpsf_matrix())
    assert np.array_equal(train_a.tpsf_matrix(), train_b.tpsf_matrix())


def test_pixel_photon_budget_scales_with_intensity(small_grid):
    image = np.zeros((1, 3, 3), dtype=np.uint8)
    image[0, 0, 0], image[0, 1, 1], image[0, 2, 2] = 1, 51, 255
    budgets = {r.pixel_xy: r.peak_counts for r in build_dataset(image, small_grid, peak_counts=500.0, seed=1).records}
    assert budgets[(0, 0)] == pytest.approx(500.0 / 255)
    assert budgets[(1, 1)] == pytest.approx(100.0)
    assert budgets[(2, 2)] == pytest.approx(500.0)
    dim = build_dataset(image, small_grid, peak_counts=100.0, seed=1).records
    assert min(r.peak_counts for r in dim) == 1.0


def test_tpsf_peak_follows_sfd_peak_and_noise_keeps_scale(small_grid):
    image = np.full((1, 16, 16), 255, dtype=np.uint8)
    dataset = build_dataset(image, small_grid, peak_counts=100.0, params_mode=ParamsMode.PER_PIXEL, seed=11)
    assert len(dataset) == 256
    for record in dataset.records:
        assert np.argmax(record.tpsf) >= np.argmax(record.sfd)
        assert 0.5 <= record.tpsf.max() <= 1.5
