"""
Synthetic FLI data: bi-exponential SFDs, IRF convolution, Poisson photon noise
and MNIST-driven spatial amplitude maps.
"""

import gzip
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import ConfigError, IdxFormatError, IrfError, ShapeError
from src.tensor_ops import Tensor

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1
IDX3_MAGIC = 0x00000803
TAU1_RANGE_NS = (0.2, 0.8)
TAU2_RANGE_NS = (0.8, 1.5)
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass
class TimeGrid:
    """Gate layout of the time-resolved acquisition; t[i] = i * gate_width_ns."""
    n_gates: int = 256
    gate_width_ns: float = 10.0 / 256

    @property
    def window_ns(self) -> float:
        return self.n_gates * self.gate_width_ns

    @property
    def times(self) -> Tensor:
        return np.arange(self.n_gates, dtype=np.float64) * self.gate_width_ns

    @classmethod
    def from_window(cls, n_gates: int, window_ns: float = 10.0) -> "TimeGrid":
        grid = cls(n_gates=n_gates, gate_width_ns=window_ns / n_gates)
        grid.validate()
        return grid

    def validate(self, tau_max_ns: float = TAU2_RANGE_NS[1]) -> None:
        if self.n_gates < 8:
            raise ConfigError(f"Need at least 8 gates, got {self.n_gates}")
        if self.gate_width_ns <= 0:
            raise ConfigError(f"Gate width must be positive, got {self.gate_width_ns}")
        if self.window_ns < 4.0 * tau_max_ns - 1e-9:
            raise ConfigError(
                f"Window {self.window_ns:.3f} ns is shorter than 4 x {tau_max_ns} ns; decay tails would be cut")


@dataclass
class DecayParams:
    """Bi-exponential parameters: a_r is the amplitude fraction of the short component."""
    a_r: float
    tau1_ns: float
    tau2_ns: float

    def validate(self) -> None:
        if not 0.0 <= self.a_r <= 1.0:
            raise ConfigError(f"a_r must be in [0, 1], got {self.a_r}")
        if not TAU1_RANGE_NS[0] <= self.tau1_ns <= TAU1_RANGE_NS[1]:
            raise ConfigError(f"tau1 must be in {TAU1_RANGE_NS} ns, got {self.tau1_ns}")
        if not TAU2_RANGE_NS[0] <= self.tau2_ns <= TAU2_RANGE_NS[1]:
            raise ConfigError(f"tau2 must be in {TAU2_RANGE_NS} ns, got {self.tau2_ns}")
        if self.tau1_ns >= self.tau2_ns:
            raise ConfigError(f"tau1 ({self.tau1_ns}) must be shorter than tau2 ({self.tau2_ns})")

    @classmethod
    def mono(cls, tau_ns: float) -> "DecayParams":
        """Mono-exponential decay expressed with a_r = 0."""
        if tau_ns <= 0:
            raise ConfigError(f"Lifetime must be positive, got {tau_ns}")
        return cls(a_r=0.0, tau1_ns=min(TAU1_RANGE_NS[0], tau_ns), tau2_ns=tau_ns)


@dataclass
class Irf:
    """Instrument response: nonnegative samples with unit mass."""
    samples: Tensor

    def validate(self, n_gates: Optional[int] = None) -> None:
        if n_gates is not None and self.samples.shape != (n_gates,):
            raise IrfError(f"IRF has {self.samples.size} samples, expected {n_gates}")
        if np.any(self.samples < 0):
            raise IrfError("IRF contains negative samples")
        if abs(float(self.samples.sum()) - 1.0) > 1e-9:
            raise IrfError(f"IRF mass is {self.samples.sum()}, expected 1")
        if int(np.argmax(self.samples)) >= self.samples.size / 4:
            raise IrfError("IRF peak must sit in the first quarter of the window")


@dataclass
class IrfConfig:
    fwhm_ns: float = 0.2
    center_ns: float = 0.5
    jitter_gates: float = 1.0
    # a measured IRF replaces the synthetic Gaussian (no jitter applied)
    measured: Optional[Irf] = None


class ParamsMode(Enum):
    """How decay parameters are assigned to image pixels."""
    PER_IMAGE = "per_image"
    PER_PIXEL = "per_pixel"


@dataclass
class DecayRecord:
    params: DecayParams
    sfd: Tensor
    tpsf: Tensor
    peak_counts: float
    pixel_xy: Optional[Tuple[int, int]] = None


@dataclass
class FliDataset:
    grid: TimeGrid
    records: List[DecayRecord]
    seed: int = 0
    generator_version: int = GENERATOR_VERSION
    source: str = "synthetic"

    def __len__(self) -> int:
        return len(self.records)

    def tpsf_matrix(self) -> Tensor:
        if not self.records:
            return np.zeros((0, self.grid.n_gates))
        return np.stack([r.tpsf for r in self.records])

    def sfd_matrix(self) -> Tensor:
        if not self.records:
            return np.zeros((0, self.grid.n_gates))
        return np.stack([r.sfd for r in self.records])

    def subset(self, indices: Sequence[int]) -> "FliDataset":
        return FliDataset(grid=self.grid, records=[self.records[i] for i in indices],
                          seed=self.seed, generator_version=self.generator_version,
                          source=self.source)

    def validate(self) -> None:
        for i, record in enumerate(self.records):
            if record.sfd.shape != (self.grid.n_gates,) or record.tpsf.shape != (self.grid.n_gates,):
                raise ShapeError(f"Record {i} does not match the {self.grid.n_gates}-gate grid")


def sample_decay_params(rng: np.random.Generator) -> DecayParams:
    """Independent uniform draws of (a_r, tau1, tau2) over the physiological ranges."""
    tau1 = rng.uniform(*TAU1_RANGE_NS)
    tau2 = rng.uniform(*TAU2_RANGE_NS)
    a_r = rng.uniform(0.0, 1.0)
    return DecayParams(a_r=float(a_r), tau1_ns=float(tau1), tau2_ns=float(tau2))


def eval_biexp(params: DecayParams, grid: TimeGrid) -> Tensor:
    """f(t) = a_r exp(-t/tau1) + (1 - a_r) exp(-t/tau2)."""
    t = grid.times
    return params.a_r * np.exp(-t / params.tau1_ns) + (1.0 - params.a_r) * np.exp(-t / params.tau2_ns)


def synth_irf(grid: TimeGrid, fwhm_ns: float = 0.2, center_ns: float = 0.5,
              rng: Optional[np.random.Generator] = None, jitter_gates: float = 1.0) -> Irf:
    """
    Discretized Gaussian IRF with optional per-pixel center jitter.

    Args:
        grid: Time grid
        fwhm_ns: Full width at half maximum
        center_ns: Nominal peak position
        rng: Source for the jitter; no jitter when None
        jitter_gates: Half-width of the uniform center jitter, in gates

    Returns:
        Irf with unit mass
    """
    if fwhm_ns <= 0:
        raise IrfError(f"IRF FWHM must be positive, got {fwhm_ns}")
    if fwhm_ns > grid.window_ns / 4:
        raise IrfError(f"IRF FWHM {fwhm_ns} ns is wider than a quarter of the {grid.window_ns} ns window")

    center = center_ns
    if rng is not None and jitter_gates > 0:
        center += rng.uniform(-jitter_gates, jitter_gates) * grid.gate_width_ns
    if center < 0 or center >= grid.window_ns / 4:
        raise IrfError(f"IRF center {center:.3f} ns falls outside the first quarter of the window")

    sigma = fwhm_ns * FWHM_TO_SIGMA
    samples = np.exp(-0.5 * ((grid.times - center) / sigma) ** 2)
    total = samples.sum()
    if not np.isfinite(total) or total <= 0:
        samples = np.zeros(grid.n_gates)
        samples[int(round(center / grid.gate_width_ns))] = 1.0
    else:
        samples = samples / total
    return Irf(samples=samples)


def load_irf(path: Union[str, Path], n_gates: int) -> Irf:
    """Read a measured IRF (one float per line) and rescale it to unit mass."""
    try:
        frame = pd.read_csv(path, header=None)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IrfError(f"Cannot read IRF file {path}: {e}")
    if frame.shape[1] != 1:
        raise IrfError(f"IRF file {path} must contain a single column, found {frame.shape[1]}")
    try:
        values = frame.iloc[:, 0].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise IrfError(f"IRF file {path} contains non-numeric values: {e}")
    if values.size != n_gates:
        raise IrfError(f"IRF file {path} has {values.size} values, expected {n_gates}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise IrfError(f"IRF file {path} contains negative or non-finite values")
    total = values.sum()
    if total <= 0:
        raise IrfError(f"IRF file {path} is all zero")
    irf = Irf(samples=values / total)
    irf.validate(n_gates)
    return irf


def save_irf(irf: Irf, path: Union[str, Path]) -> None:
    pd.DataFrame(irf.samples).to_csv(path, header=False, index=False, float_format="%.9g")


def convolve_irf(sfd: Tensor, irf: Irf, normalize: bool = True) -> Tensor:
    """Causal convolution y[k] = sum_{j<=k} sfd[j] irf[k-j], truncated to len(sfd)."""
    sfd = np.asarray(sfd, dtype=np.float64)
    if sfd.shape != irf.samples.shape:
        raise ShapeError(f"SFD length {sfd.shape} does not match IRF length {irf.samples.shape}")
    y = np.convolve(sfd, irf.samples)[: sfd.size]
    if normalize:
        peak = y.max()
        if peak > 0:
            y = y / peak
    return y


def apply_poisson(clean: Tensor, peak_counts: float, rng: np.random.Generator) -> Tensor:
    """noisy[i] = Poisson(peak_counts * clean[i]) / peak_counts."""
    clean = np.asarray(clean, dtype=np.float64)
    if peak_counts < 1:
        raise ConfigError(f"peak_counts must be >= 1, got {peak_counts}")
    if np.any(clean < 0):
        raise ShapeError("Poisson noise needs a nonnegative clean curve")
    return rng.poisson(peak_counts * clean).astype(np.float64) / peak_counts


def parse_idx(data: bytes) -> np.ndarray:
    """
    Parse an IDX3 image file (big-endian magic 0x00000803, count, rows, cols, pixels).

    Returns:
        uint8 array of shape (count, rows, cols)
    """
    if len(data) >= 2 and data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 16:
        raise IdxFormatError(f"IDX header truncated: {len(data)} bytes")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX3_MAGIC:
        raise IdxFormatError(f"Bad magic 0x{magic:08x}: expected IDX3 (0x{IDX3_MAGIC:08x})")
    expected = count * rows * cols
    payload = data[16:]
    if len(payload) < expected:
        raise IdxFormatError(f"IDX payload truncated: {len(payload)} of {expected} bytes")
    if (rows, cols) != (28, 28):
        logger.warning(f"IDX images are {rows}x{cols}, not the usual 28x28")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(count, rows, cols).copy()


def load_idx(path: Union[str, Path]) -> np.ndarray:
    """Read a raw or gzip-compressed IDX3 file."""
    with open(path, "rb") as f:
        return parse_idx(f.read())


def _pixel_rng(seed: int, image_index: int, x: int, y: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, x, y]))


def _pixel_irf(grid: TimeGrid, irf_config: IrfConfig, rng: np.random.Generator) -> Irf:
    if irf_config.measured is not None:
        return irf_config.measured
    return synth_irf(grid, irf_config.fwhm_ns, irf_config.center_ns, rng, irf_config.jitter_gates)


def make_record(params: DecayParams, grid: TimeGrid, irf: Irf, peak_counts: float,
                rng: np.random.Generator, pixel_xy: Optional[Tuple[int, int]] = None) -> DecayRecord:
    sfd = eval_biexp(params, grid)
    tpsf = apply_poisson(convolve_irf(sfd, irf), peak_counts, rng)
    return DecayRecord(params=params, sfd=sfd, tpsf=tpsf, peak_counts=float(peak_counts), pixel_xy=pixel_xy)


def _image_records(image: np.ndarray, image_index: int, grid: TimeGrid, irf_config: IrfConfig,
                   peak_counts: float, params_mode: ParamsMode, seed: int) -> List[DecayRecord]:
    image_rng = np.random.default_rng(np.random.SeedSequence([seed, image_index]))
    shared = sample_decay_params(image_rng)
    records = []
    rows, cols = image.shape
    for y in range(rows):
        for x in range(cols):
            intensity = int(image[y, x])
            if intensity == 0:
                continue
            rng = _pixel_rng(seed, image_index, x, y)
            if params_mode == ParamsMode.PER_IMAGE:
                params = DecayParams(a_r=intensity / 255.0, tau1_ns=shared.tau1_ns, tau2_ns=shared.tau2_ns)
            else:
                params = sample_decay_params(rng)
            irf = _pixel_irf(grid, irf_config, rng)
            # apply_poisson needs at least one photon at the peak
            counts = max(1.0, peak_counts * intensity / 255.0)
            records.append(make_record(params, grid, irf, counts, rng, pixel_xy=(x, y)))
    return records


def build_dataset(images: np.ndarray, grid: TimeGrid, irf_config: Optional[IrfConfig] = None,
                  peak_counts: float = 500.0, params_mode: ParamsMode = ParamsMode.PER_IMAGE,
                  seed: int = 42, workers: int = 1) -> FliDataset:
    """
    Turn intensity images into per-pixel (SFD, TPSF) records.

    Each nonzero pixel becomes one record; lifetimes are drawn once per image and
    the short-component fraction follows pixel intensity. Every pixel draws from
    its own stream derived from (seed, image, x, y), so worker count never
    changes the result.
    """
    grid.validate()
    irf_config = irf_config or IrfConfig()
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[0] == 0:
        raise ConfigError("No images supplied")

    job = partial(_image_records, grid=grid, irf_config=irf_config, peak_counts=peak_counts,
                  params_mode=params_mode, seed=seed)
    indices = range(images.shape[0])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(job, images, indices, chunksize=max(1, len(indices) // (4 * workers))))
    else:
        per_image = [job(image, i) for image, i in zip(images, indices)]

    records = [record for chunk in per_image for record in chunk]
    if not records:
        logger.warning("All images are zero; dataset is empty")
    logger.info(f"Built {len(records)} records from {images.shape[0]} images")
    return FliDataset(grid=grid, records=records, seed=seed, source="mnist")


def build_mono_dataset(n_records: int, grid: TimeGrid, tau_ns: float = 1.0, peak_counts: float = 1000.0,
                       irf_config: Optional[IrfConfig] = None, seed: int = 42) -> FliDataset:
    """Mono-exponential validation scenario (single dye, one lifetime)."""
    grid.validate(tau_max_ns=max(tau_ns, TAU2_RANGE_NS[1]))
    irf_config = irf_config or IrfConfig()
    params = DecayParams.mono(tau_ns)
    records = []
    for i in range(n_records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        irf = _pixel_irf(grid, irf_config, rng)
        records.append(make_record(params, grid, irf, peak_counts, rng, pixel_xy=(i, 0)))
    logger.info(f"Built {n_records} mono-exponential records (tau={tau_ns} ns)")
    return FliDataset(grid=grid, records=records, seed=seed, source=f"mono:{tau_ns}")


def split_dataset(dataset: FliDataset, val_fraction: float = 0.1,
                  seed: int = 42) -> Tuple[FliDataset, FliDataset]:
    """Seeded record-level split into (train, validation)."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * val_fraction))) if len(dataset) > 1 else 0
    return dataset.subset(sorted(order[n_val:])), dataset.subset(sorted(order[:n_val]))


def dataset_stats(dataset: FliDataset) -> Dict[str, float]:
    """Summary of ground truth spread, logged by the CLI after generation."""
    frame = pd.DataFrame({
        "a_r": [r.params.a_r for r in dataset.records],
        "tau1_ns": [r.params.tau1_ns for r in dataset.records],
        "tau2_ns": [r.params.tau2_ns for r in dataset.records],
        "peak_counts": [r.peak_counts for r in dataset.records],
    })
    stats = {"records": float(len(frame))}
    for column in frame.columns:
        stats[f"{column}_mean"] = float(frame[column].mean()) if len(frame) else 0.0
    return stats
