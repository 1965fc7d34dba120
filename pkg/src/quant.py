"""
Per-tensor symmetric quantization, fake quantization for QAT, activation
calibration and post-training quantization of GRU models.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from src.datagen import FliDataset
from src.errors import ConfigError, QuantizationError
from src.gru_model import SeqModel, forward
from src.tensor_ops import Tensor

logger = logging.getLogger(__name__)

SUPPORTED_BITS = (8, 16)
EMA_DECAY = 0.99
# Q15 outputs of the LUTs and the 16-bit blend; hidden sites never go finer than this.
Q15_SCALE = 2.0 ** -15
MIN_HIDDEN_SCALE = 1.0 / 32767
LUT_SIZE = 1024
LUT_RANGE = 8.0


class QuantMode(Enum):
    """Divisor used when deriving a scale from max|x|."""
    SIGNED_SYMMETRIC = "signed"
    FULL_RANGE = "paper"

    @classmethod
    def _missing_(cls, value):
        if value == "full_range":
            return cls.FULL_RANGE
        return None


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"Unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")


def qmax(bits: int) -> int:
    """Largest magnitude representable in the signed range."""
    _check_bits(bits)
    return 2 ** (bits - 1) - 1


def scale_divisor(bits: int, mode: QuantMode) -> int:
    _check_bits(bits)
    if mode == QuantMode.FULL_RANGE:
        return 2 ** bits - 1
    return 2 ** (bits - 1) - 1


def int_dtype(bits: int) -> type:
    _check_bits(bits)
    return np.int8 if bits == 8 else np.int16


def _scale_from_maxabs(max_abs: float, bits: int, mode: QuantMode) -> float:
    if max_abs <= 0 or not np.isfinite(max_abs):
        return 1.0
    # stored as float32 so persisted models reproduce the same integers
    return float(np.float32(max_abs / scale_divisor(bits, mode)))


def compute_scale(x: Tensor, bits: int, mode: QuantMode = QuantMode.SIGNED_SYMMETRIC) -> float:
    """s = max|x| / (2^(b-1) - 1) (signed) or max|x| / (2^b - 1) (full range); 1 for all-zero x."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("Cannot compute a scale for an empty tensor")
    return _scale_from_maxabs(float(np.max(np.abs(x))), bits, mode)


@dataclass
class QuantizedTensor:
    q: np.ndarray
    scale: float
    bits: int

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.q.shape

    def dequantize(self) -> Tensor:
        return self.q.astype(np.float64) * self.scale


def _round_clamp(x: Tensor, scale: float, bits: int) -> np.ndarray:
    limit = qmax(bits)
    # np.rint rounds half to even
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale), -limit, limit)


def quantize_tensor(x: Tensor, bits: int, mode: QuantMode = QuantMode.SIGNED_SYMMETRIC,
                    scale: Optional[float] = None) -> QuantizedTensor:
    """q = clamp(round_half_even(x / s)) in the signed range of `bits`."""
    if scale is None:
        scale = compute_scale(x, bits, mode)
    if scale <= 0:
        raise QuantizationError(f"Scale must be positive, got {scale}")
    q = _round_clamp(x, scale, bits).astype(int_dtype(bits))
    return QuantizedTensor(q=q, scale=float(scale), bits=bits)


def dequantize_tensor(qt: QuantizedTensor) -> Tensor:
    return qt.dequantize()


def fake_quant(x: Tensor, bits: int, mode: QuantMode = QuantMode.SIGNED_SYMMETRIC,
               scale: Optional[float] = None) -> Tensor:
    """dequantize(quantize(x)); gradients treat this as identity on in-range elements."""
    if scale is None:
        scale = compute_scale(x, bits, mode)
    return _round_clamp(x, scale, bits) * scale


def ste_mask(x: Tensor, bits: int, scale: float) -> Tensor:
    """1 where x lies inside the representable range, 0 where it was clamped."""
    limit = qmax(bits) * scale
    return (np.abs(np.asarray(x, dtype=np.float64)) <= limit + 0.5 * scale).astype(np.float64)


@dataclass
class CalibrationStats:
    """Running max-abs per activation site (EMA) and the frozen scales derived from it."""
    decay: float = EMA_DECAY
    running: Dict[str, float] = field(default_factory=dict)
    scales: Dict[str, float] = field(default_factory=dict)
    batches: int = 0

    @property
    def frozen(self) -> bool:
        return bool(self.scales)

    def observe(self, site: str, x: Tensor) -> None:
        batch_max = float(np.max(np.abs(x))) if np.size(x) else 0.0
        if site not in self.running:
            self.running[site] = batch_max
        else:
            self.running[site] = self.decay * self.running[site] + (1.0 - self.decay) * batch_max

    def current_scale(self, site: str, bits: int, mode: QuantMode) -> float:
        if site in self.scales:
            return self.scales[site]
        scale = _scale_from_maxabs(self.running.get(site, 0.0), bits, mode)
        if site != "input":
            scale = max(scale, float(np.float32(MIN_HIDDEN_SCALE)))
        return scale

    def freeze(self, bits: int, mode: QuantMode) -> None:
        self.scales = {site: self.current_scale(site, bits, mode) for site in sorted(self.running)}
        for site, scale in self.scales.items():
            if scale <= 0:
                raise QuantizationError(f"Calibration produced a non-positive scale for {site}")


def is_bias(name: str) -> bool:
    return name.endswith(".b") or ".b_" in name


class FakeQuantHook:
    """
    Forward hook that fake-quantizes weights and activation sites.

    Weight scales are recomputed from the live weights each forward pass; activation
    scales come from CalibrationStats, optionally updated from the data seen.
    Biases are left in float (the integer engine keeps them at 32 bits).
    """

    def __init__(self, bits: Optional[int], mode: QuantMode = QuantMode.SIGNED_SYMMETRIC,
                 stats: Optional[CalibrationStats] = None, quantize_weights: bool = True,
                 quantize_activations: bool = True, update_stats: bool = False):
        if bits is not None:
            _check_bits(bits)
        self.bits = bits
        self.mode = mode
        self.stats = stats if stats is not None else CalibrationStats()
        self.quantize_weights = quantize_weights and bits is not None
        self.quantize_activations = quantize_activations and bits is not None
        self.update_stats = update_stats
        self.clamped = 0

    def weight(self, name: str, w: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if not self.quantize_weights or is_bias(name):
            return w, None
        scale = compute_scale(w, self.bits, self.mode)
        mask = ste_mask(w, self.bits, scale)
        return fake_quant(w, self.bits, self.mode, scale), mask

    def activation(self, site: str, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if self.update_stats:
            self.stats.observe(site, x)
        if not self.quantize_activations:
            return x, None
        scale = self.stats.current_scale(site, self.bits, self.mode)
        mask = ste_mask(x, self.bits, scale)
        self.clamped += int(mask.size - mask.sum())
        return fake_quant(x, self.bits, self.mode, scale), mask


@dataclass
class QuantizedModel:
    config: Any
    bits: int
    mode: QuantMode
    weights: Dict[str, QuantizedTensor]
    biases: Dict[str, np.ndarray]
    stats: CalibrationStats
    luts: Dict[str, np.ndarray]
    calib_records: int = 0
    seed: int = 0
    _engine: Any = field(default=None, repr=False, compare=False)

    @property
    def calibrated(self) -> bool:
        return self.stats.frozen

    @property
    def activation_scales(self) -> Dict[str, float]:
        return dict(self.stats.scales)

    def tensor_names(self):
        return sorted(list(self.weights) + list(self.biases))


def build_lut(kind: str) -> np.ndarray:
    """1024 Q15 samples of sigmoid or tanh at x_i = -8 + 16 i / 1023."""
    xs = np.linspace(-LUT_RANGE, LUT_RANGE, LUT_SIZE)
    if kind == "sigmoid":
        ys = 1.0 / (1.0 + np.exp(-xs))
    elif kind == "tanh":
        ys = np.tanh(xs)
    else:
        raise ConfigError(f"Unknown activation {kind!r}")
    return np.clip(np.rint(ys / Q15_SCALE), -32767, 32767).astype(np.int16)


def calibrate(model: SeqModel, tpsf: Tensor, stats: Optional[CalibrationStats] = None,
              batch_size: int = 64) -> CalibrationStats:
    """Float forward passes that only observe activation sites."""
    stats = stats if stats is not None else CalibrationStats()
    hook = FakeQuantHook(bits=None, stats=stats, update_stats=True)
    x = np.atleast_2d(np.asarray(tpsf, dtype=np.float64))
    for start in range(0, x.shape[0], batch_size):
        forward(model, x[start:start + batch_size], hook)
        stats.batches += 1
    return stats


def ptq_model(model: SeqModel, bits: int, calib: FliDataset,
              mode: QuantMode = QuantMode.SIGNED_SYMMETRIC, batch_size: int = 64) -> QuantizedModel:
    """
    Post-training quantization.

    Args:
        model: Trained float model
        bits: 8 or 16
        calib: Records used to calibrate activation scales
        mode: Scale divisor convention
        batch_size: Calibration batch size (one EMA update per batch)

    Returns:
        Calibrated QuantizedModel with per-tensor weight scales and LUTs
    """
    _check_bits(bits)
    if len(calib) == 0:
        raise QuantizationError("Calibration set is empty")
    if len(calib) < 64:
        logger.warning(f"Calibrating on only {len(calib)} records; at least 64 are recommended")

    weights: Dict[str, QuantizedTensor] = {}
    biases: Dict[str, np.ndarray] = {}
    for name, tensor in model.parameters().items():
        if is_bias(name):
            biases[name] = tensor.astype(np.float32)
        else:
            weights[name] = quantize_tensor(tensor, bits, mode)

    stats = calibrate(model, calib.tpsf_matrix(), batch_size=batch_size)
    stats.freeze(bits, mode)
    logger.info(f"PTQ {bits}-bit ({mode.value}): {len(weights)} weight tensors, "
                f"activation scales {', '.join(f'{k}={v:.3g}' for k, v in stats.scales.items())}")
    return QuantizedModel(config=model.config, bits=bits, mode=mode, weights=weights, biases=biases,
                          stats=stats, luts={"sigmoid": build_lut("sigmoid"), "tanh": build_lut("tanh")},
                          calib_records=len(calib), seed=calib.seed)


def dequantized_model(qmodel: QuantizedModel) -> SeqModel:
    """Float model whose weights are exactly the dequantized integers."""
    params = {name: qt.dequantize() for name, qt in qmodel.weights.items()}
    params.update({name: b.astype(np.float64) for name, b in qmodel.biases.items()})
    return SeqModel.from_parameters(qmodel.config, params)


def simulate_fake_quant(qmodel: QuantizedModel, tpsf: Tensor) -> Tensor:
    """Float reference for the integer engine: dequantized weights, fake-quantized activation sites."""
    if not qmodel.calibrated:
        raise QuantizationError("Model is not calibrated")
    hook = FakeQuantHook(bits=qmodel.bits, mode=qmodel.mode, stats=qmodel.stats, quantize_weights=False)
    out, _ = forward(dequantized_model(qmodel), tpsf, hook)
    return out


def model_footprint(model: Union[SeqModel, QuantizedModel], bits: int = 32) -> Dict[str, int]:
    """Parameter count and weight storage in bytes; biases always count 4 bytes."""
    if isinstance(model, QuantizedModel):
        weight_count = sum(qt.q.size for qt in model.weights.values())
        bias_count = sum(b.size for b in model.biases.values())
        bits = model.bits
    else:
        params = model.parameters()
        weight_count = sum(t.size for name, t in params.items() if not is_bias(name))
        bias_count = sum(t.size for name, t in params.items() if is_bias(name))
    return {
        "parameters": int(weight_count + bias_count),
        "bits": int(bits),
        "bytes": int(weight_count * bits // 8 + bias_count * 4),
    }


def compression_summary(teacher: SeqModel, student: Union[SeqModel, QuantizedModel]) -> Dict[str, float]:
    """Teacher-to-student reduction in parameters and bytes."""
    big = model_footprint(teacher, 32)
    small = model_footprint(student, 32 if isinstance(student, SeqModel) else student.bits)
    return {
        "teacher_parameters": big["parameters"],
        "student_parameters": small["parameters"],
        "parameter_ratio": small["parameters"] / big["parameters"],
        "parameter_reduction_pct": 100.0 * (1.0 - small["parameters"] / big["parameters"]),
        "teacher_bytes": big["bytes"],
        "student_bytes": small["bytes"],
        "byte_reduction_pct": 100.0 * (1.0 - small["bytes"] / big["bytes"]),
    }
