"""
Evaluation metrics for deconvolved SFDs: RMSE, R^2, L2 norm and DTW, per record
and aggregated as mean +/- std, plus lifetime recovery checks.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
from sklearn.metrics import mean_squared_error, r2_score

from src.datagen import DecayParams, FliDataset, TimeGrid
from src.errors import QuantizationError, ShapeError
from src.gru_model import SeqModel, predict
from src.quant import QuantizedModel, dequantized_model
from src.tensor_ops import Tensor

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

logger = logging.getLogger(__name__)

METRIC_NAMES = ("rmse", "r2", "l2", "dtw")


class EngineKind(Enum):
    FLOAT = "float"
    INT = "int"


class DtwDistance(NamedTuple):
    raw: float
    normalized: float


def _pair(pred: Tensor, truth: Tensor) -> tuple:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"Length mismatch: prediction {p.shape} vs truth {t.shape}")
    if p.size == 0:
        raise ShapeError("Cannot score empty sequences")
    return p, t


def rmse(pred: Tensor, truth: Tensor) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(mean_squared_error(t, p)))


def r2(pred: Tensor, truth: Tensor) -> Optional[float]:
    """1 - SS_res / SS_tot; None when the truth is constant."""
    p, t = _pair(pred, truth)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot <= 0.0:
        return None
    return float(r2_score(t, p))


def l2_norm(pred: Tensor, truth: Tensor) -> float:
    p, t = _pair(pred, truth)
    diff = p - t
    return float(np.sqrt(np.sum(diff * diff)))


@njit(cache=True)
def _dtw_table(a, b):
    n, m = a.shape[0], b.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = abs(a[i - 1] - b[j - 1])
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost + best
    return acc[n, m]


def dtw(a: Tensor, b: Tensor) -> DtwDistance:
    """
    Classic DTW with local cost |a_i - b_j| and match/insert/delete steps.

    Returns:
        Raw accumulated cost and the cost divided by len(a) + len(b)
    """
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ShapeError("DTW needs two non-empty sequences")
    raw = float(_dtw_table(a, b))
    return DtwDistance(raw=raw, normalized=raw / (a.size + b.size))


def fit_lifetime(sfd: Tensor, grid: TimeGrid, floor_fraction: float = 0.01) -> float:
    """
    Log-linear least-squares lifetime from the peak to the first gate below 1% of it.

    Raises:
        ShapeError: fewer than 4 usable gates or non-positive values in the window
    """
    y = np.asarray(sfd, dtype=np.float64).reshape(-1)
    if y.size != grid.n_gates:
        raise ShapeError(f"Curve has {y.size} gates, grid has {grid.n_gates}")
    peak = int(np.argmax(y))
    if y[peak] <= 0:
        raise ShapeError("Curve has no positive peak")
    below = np.nonzero(y[peak:] < floor_fraction * y[peak])[0]
    end = peak + (int(below[0]) if below.size else y.size - peak)
    window = y[peak:end]
    if window.size < 4:
        raise ShapeError(f"Only {window.size} gates in the fit window; need at least 4")
    if np.any(window <= 0):
        raise ShapeError("Non-positive values inside the fit window")
    slope, _ = np.polyfit(grid.times[peak:end], np.log(window), 1)
    if slope >= 0:
        raise ShapeError("Curve does not decay inside the fit window")
    return float(-1.0 / slope)


def amplitude_weighted_tau(params: DecayParams) -> float:
    return params.a_r * params.tau1_ns + (1.0 - params.a_r) * params.tau2_ns


@dataclass
class MetricsReport:
    engine: str
    rmse: List[float] = field(default_factory=list)
    r2: List[Optional[float]] = field(default_factory=list)
    l2: List[float] = field(default_factory=list)
    dtw: List[float] = field(default_factory=list)
    dtw_raw: List[float] = field(default_factory=list)
    path: str = "float"
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return len(self.rmse)

    @property
    def r2_excluded(self) -> int:
        return sum(1 for value in self.r2 if value is None)

    def _values(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        return np.array([v for v in values if v is not None], dtype=np.float64)

    def aggregates(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for name in METRIC_NAMES:
            values = self._values(name)
            out[f"{name}_mean"] = float(np.mean(values)) if values.size else float("nan")
            out[f"{name}_std"] = float(np.std(values)) if values.size else float("nan")
        return out

    def to_frame(self) -> pd.DataFrame:
        """One row per record, followed by mean and std footer rows."""
        frame = pd.DataFrame({
            "record": [str(i) for i in range(self.n_records)],
            "rmse": self.rmse,
            "r2": [np.nan if v is None else v for v in self.r2],
            "l2": self.l2,
            "dtw": self.dtw,
            "dtw_raw": self.dtw_raw,
        })
        agg = self.aggregates()
        raw = np.array(self.dtw_raw, dtype=np.float64)
        footer = pd.DataFrame([
            {"record": "mean", **{n: agg[f"{n}_mean"] for n in METRIC_NAMES},
             "dtw_raw": float(raw.mean()) if raw.size else np.nan},
            {"record": "std", **{n: agg[f"{n}_std"] for n in METRIC_NAMES},
             "dtw_raw": float(raw.std()) if raw.size else np.nan},
        ])
        return pd.concat([frame, footer], ignore_index=True)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    def summary(self) -> Dict[str, object]:
        return {
            "engine": self.engine,
            "path": self.path,
            "records": self.n_records,
            "r2_excluded": self.r2_excluded,
            "aggregates": self.aggregates(),
            "provenance": self.provenance,
        }

    def save_summary(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)


def score_curves(preds: Tensor, truths: Tensor, engine: str = "float", path: str = "float") -> MetricsReport:
    """Per-record metrics for aligned prediction/truth matrices."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape:
        raise ShapeError(f"Predictions {preds.shape} and truths {truths.shape} differ")
    report = MetricsReport(engine=engine, path=path)
    for pred, truth in zip(preds, truths):
        report.rmse.append(rmse(pred, truth))
        report.r2.append(r2(pred, truth))
        report.l2.append(l2_norm(pred, truth))
        distance = dtw(pred, truth)
        report.dtw.append(distance.normalized)
        report.dtw_raw.append(distance.raw)
    if report.r2_excluded:
        logger.warning(f"R2 undefined for {report.r2_excluded} constant-truth record(s); excluded from aggregates")
    return report


def run_inference(model: Union[SeqModel, QuantizedModel], tpsf: Tensor,
                  engine: Union[str, EngineKind] = EngineKind.FLOAT) -> tuple:
    """
    Predict SFDs on the selected engine.

    Returns:
        (predictions, engine tag, path) where path is float, dequantized or integer
    """
    from src.int_engine import int_infer

    engine = EngineKind(engine)
    if isinstance(model, QuantizedModel):
        tag = f"int{model.bits}"
        if engine == EngineKind.INT:
            return int_infer(model, tpsf), tag, "integer"
        if not model.calibrated:
            raise QuantizationError("Model is not calibrated")
        return predict(dequantized_model(model), tpsf), tag, "dequantized"
    if engine == EngineKind.INT:
        raise QuantizationError("model not quantized")
    return predict(model, tpsf), "float", "float"


def evaluate(model: Union[SeqModel, QuantizedModel], dataset: FliDataset,
             engine: Union[str, EngineKind] = EngineKind.FLOAT) -> MetricsReport:
    """Run inference on every record and score it against the clean SFD."""
    if dataset.grid.n_gates != model.config.seq_len:
        raise ShapeError(f"Dataset has {dataset.grid.n_gates} gates, model expects {model.config.seq_len}")
    preds, tag, path = run_inference(model, dataset.tpsf_matrix(), engine)
    report = score_curves(preds, dataset.sfd_matrix(), engine=tag, path=path)
    report.provenance = {"dataset_seed": dataset.seed, "dataset_source": dataset.source,
                         "generator_version": dataset.generator_version, "model": model.config.to_dict()}
    agg = report.aggregates()
    logger.info(f"Evaluated {report.n_records} records on {tag}/{path}: "
                f"RMSE {agg['rmse_mean']:.4f}+/-{agg['rmse_std']:.4f}, R2 {agg['r2_mean']:.3f}")
    return report


def lifetime_report(model: Union[SeqModel, QuantizedModel], dataset: FliDataset,
                    engine: Union[str, EngineKind] = EngineKind.FLOAT) -> pd.DataFrame:
    """Recovered lifetime from each deconvolved curve next to the ground truth."""
    preds, _, _ = run_inference(model, dataset.tpsf_matrix(), engine)
    rows = []
    for record, pred in zip(dataset.records, preds):
        try:
            tau = fit_lifetime(pred, dataset.grid)
        except ShapeError as e:
            logger.debug(f"Lifetime fit failed: {e}")
            tau = float("nan")
        rows.append({"true_tau_ns": amplitude_weighted_tau(record.params), "fit_tau_ns": tau})
    frame = pd.DataFrame(rows, columns=["true_tau_ns", "fit_tau_ns"], dtype=np.float64)
    frame["error_ns"] = frame["fit_tau_ns"] - frame["true_tau_ns"]
    failed = int(frame["fit_tau_ns"].isna().sum())
    if len(frame):
        logger.info(f"Lifetime recovery: median {frame['fit_tau_ns'].median():.3f} ns over "
                    f"{len(frame) - failed} fits ({failed} failed)")
    return frame
