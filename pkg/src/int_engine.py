"""
Bit-faithful integer inference for quantized GRU models.

Datapath per GRU layer and step:
- int_matvec of b-bit weights with b-bit activations into 32-bit accumulators
- requantize each accumulator onto the pre-activation grid (2^-11, +/-8 -> +/-16384)
- interpolated 1024-entry LUTs give sigmoid/tanh in Q15
- the candidate, the previous state and the h_t blend are Q15; only h_t is rounded
  onto the hidden site's b-bit scale
All arithmetic is on int64 numpy arrays, so results do not depend on platform or BLAS.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.errors import QuantizationError, ShapeError
from src.quant import (LUT_SIZE, Q15_SCALE, QuantizedModel, QuantizedTensor, build_lut, qmax)
from src.tensor_ops import Tensor

logger = logging.getLogger(__name__)

PRE_ACT_SHIFT = 11
PRE_ACT_SCALE = 2.0 ** -PRE_ACT_SHIFT
PRE_ACT_LIMIT = 8 << PRE_ACT_SHIFT
INT32_MAX = 2 ** 31 - 1
INT32_MIN = -(2 ** 31)
Q15_MAX = 2 ** 15 - 1


def int_matvec(qW: Union[QuantizedTensor, np.ndarray], qx: np.ndarray) -> np.ndarray:
    """
    Exact integer products W @ x for x of shape (k,) or (B, k).

    Returns:
        int64 array holding 32-bit accumulator values, shape (m,) or (B, m)
    """
    w = qW.q if isinstance(qW, QuantizedTensor) else np.asarray(qW)
    w = w.astype(np.int64)
    x = np.asarray(qx).astype(np.int64)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"Cannot multiply weights {w.shape} by activations {x.shape}")
    acc = x @ w.T
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise QuantizationError("Accumulator overflowed 32 bits")
    return acc


def quantize_multiplier(ratio: float, allow_left_shift: bool = False) -> Tuple[int, int]:
    """
    Encode 0 <= ratio < 1 as (Q31 multiplier, right shift).

    ratio = multiplier * 2^(-31 - shift) with multiplier in [2^30, 2^31).
    With allow_left_shift, ratios up to 2^30 are accepted and the shift may be negative.
    """
    if ratio == 0.0:
        return 0, 0
    upper = 2.0 ** 30 if allow_left_shift else 1.0
    if not 0.0 < ratio < upper:
        raise QuantizationError(f"Requantization ratio {ratio} must lie in (0, {upper:g})")
    mantissa, exponent = math.frexp(ratio)
    multiplier = int(round(mantissa * (1 << 31)))
    if multiplier == 1 << 31:
        multiplier //= 2
        exponent += 1
    shift = -exponent
    if shift < 0 and not allow_left_shift:
        raise QuantizationError(f"Requantization ratio {ratio} needs a left shift")
    return multiplier, shift


def _saturate(values: np.ndarray, limit: int) -> np.ndarray:
    return np.clip(values, -limit, limit)


def requantize(acc: Union[int, np.ndarray], multiplier: int, shift: int, bits: int = 16) -> np.ndarray:
    """round(acc * multiplier * 2^(-31 - shift)), half away from zero, saturated to `bits`."""
    acc = np.asarray(acc, dtype=np.int64)
    limit = 2 ** (bits - 1) - 1
    total = 31 + shift
    if multiplier == 0 or total > 62:
        return np.zeros_like(acc)
    prod = acc * np.int64(multiplier)
    half = np.int64(1) << np.int64(total - 1)
    magnitude = (np.abs(prod) + half) >> np.int64(total)
    return _saturate(np.sign(prod) * magnitude, limit)


def lut_activation(kind: str, qx: Union[int, np.ndarray], in_scale: float = PRE_ACT_SCALE,
                   out_scale: float = Q15_SCALE, table: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Interpolated table lookup of sigmoid/tanh on integer inputs.

    Inputs outside [-8, 8] use the boundary entries. With the default scales the
    whole computation is integer; other scales are converted onto those grids first.
    """
    table = build_lut(kind) if table is None else table
    if table.size != LUT_SIZE:
        raise ShapeError(f"LUT must have {LUT_SIZE} entries, got {table.size}")
    q = np.asarray(qx, dtype=np.int64)
    if in_scale != PRE_ACT_SCALE:
        q = np.rint(q.astype(np.float64) * (in_scale / PRE_ACT_SCALE)).astype(np.int64)

    u = np.clip(q + PRE_ACT_LIMIT, 0, 2 * PRE_ACT_LIMIT)
    pos = u * (LUT_SIZE - 1)
    idx = np.minimum(pos >> 15, LUT_SIZE - 2)
    frac = pos - (idx << 15)
    lut = table.astype(np.int64)
    lo = lut[idx]
    out = lo + (((lut[idx + 1] - lo) * frac + (1 << 14)) >> 15)

    if out_scale != Q15_SCALE:
        out = np.rint(out.astype(np.float64) * (Q15_SCALE / out_scale)).astype(np.int64)
    return out


def quantize_bias(bias: Tensor) -> np.ndarray:
    """GRU bias as int32 codes on the pre-activation grid."""
    b = np.asarray(bias, dtype=np.float64)
    return np.clip(np.rint(b / PRE_ACT_SCALE), INT32_MIN, INT32_MAX).astype(np.int64)


@dataclass
class _Requant:
    multiplier: int
    shift: int

    def __call__(self, acc: np.ndarray, bits: int = 16) -> np.ndarray:
        return requantize(acc, self.multiplier, self.shift, bits)


@dataclass
class _IntLayer:
    W: Dict[str, np.ndarray]
    U: Dict[str, np.ndarray]
    b: Dict[str, np.ndarray]
    rq_W: Dict[str, _Requant]
    rq_U: Dict[str, _Requant]
    rq_state: _Requant
    rq_q15: _Requant
    hidden: int


def _ratio_requant(ratio: float, q: np.ndarray, what: str) -> _Requant:
    if not np.any(q):
        return _Requant(0, 0)
    try:
        return _Requant(*quantize_multiplier(ratio))
    except QuantizationError as e:
        raise QuantizationError(f"{what}: {e}")


class IntegerEngine:
    """Integer-only executor built once from a calibrated QuantizedModel."""

    def __init__(self, qmodel: QuantizedModel):
        if not qmodel.calibrated:
            raise QuantizationError("Model is not calibrated")
        self.qmodel = qmodel
        self.bits = qmodel.bits
        self.limit = qmax(self.bits)
        scales = qmodel.stats.scales
        if "input" not in scales:
            raise QuantizationError("Calibration stats lack the input site")
        self.input_scale = scales["input"]
        self.sigmoid = qmodel.luts["sigmoid"].astype(np.int64)
        self.tanh = qmodel.luts["tanh"].astype(np.int64)

        self.layers: List[_IntLayer] = []
        in_scale = self.input_scale
        config = qmodel.config
        names = [f"encoder.{i}" for i in range(len(config.enc_hidden))]
        names += [f"decoder.{i}" for i in range(len(config.dec_hidden))]
        for prefix in names:
            site = f"{prefix}.h"
            if site not in scales:
                raise QuantizationError(f"Calibration stats lack site {site}")
            h_scale = scales[site]
            self.layers.append(self._build_layer(prefix, in_scale, h_scale))
            in_scale = h_scale
        self.site_scales = [scales[f"{p}.h"] for p in names]

        dense = qmodel.weights["dense.W"]
        self._check_overflow("dense.W", dense.q.shape[1])
        self.dense_W = dense.q.astype(np.int64)
        self.out_scale = float(np.float64(dense.scale) * np.float64(in_scale))
        # the output stage dequantizes, so the head bias is added in float
        self.dense_b = qmodel.biases["dense.b"].astype(np.float64)

    def _check_overflow(self, name: str, k: int) -> None:
        if k * self.limit * self.limit >= 2 ** 31:
            raise QuantizationError(
                f"{name}: {k} x {self.limit}^2 may overflow a 32-bit accumulator at {self.bits} bits")

    def _build_layer(self, prefix: str, in_scale: float, h_scale: float) -> _IntLayer:
        weights = self.qmodel.weights
        W, U, b, rq_W, rq_U = {}, {}, {}, {}, {}
        for gate in ("z", "r", "h"):
            qW = weights[f"{prefix}.W_{gate}"]
            qU = weights[f"{prefix}.U_{gate}"]
            self._check_overflow(f"{prefix}.W_{gate}", qW.q.shape[1])
            self._check_overflow(f"{prefix}.U_{gate}", qU.q.shape[1])
            W[gate] = qW.q.astype(np.int64)
            U[gate] = qU.q.astype(np.int64)
            rq_W[gate] = _ratio_requant(qW.scale * in_scale / PRE_ACT_SCALE, qW.q, f"{prefix}.W_{gate}")
            rq_U[gate] = _ratio_requant(qU.scale * h_scale / PRE_ACT_SCALE, qU.q, f"{prefix}.U_{gate}")
            b[gate] = quantize_bias(self.qmodel.biases[f"{prefix}.b_{gate}"])
        rq_state = _Requant(*quantize_multiplier(Q15_SCALE / h_scale))
        rq_q15 = _Requant(*quantize_multiplier(h_scale / Q15_SCALE, allow_left_shift=True))
        return _IntLayer(W=W, U=U, b=b, rq_W=rq_W, rq_U=rq_U, rq_state=rq_state, rq_q15=rq_q15,
                         hidden=U["z"].shape[0])

    def quantize_input(self, tpsf: Tensor) -> np.ndarray:
        x = np.asarray(tpsf, dtype=np.float64)
        return np.clip(np.rint(x / self.input_scale), -self.limit, self.limit).astype(np.int64)

    def _pre(self, layer: _IntLayer, gate: str, x_q: np.ndarray, h_q: np.ndarray) -> np.ndarray:
        acc_x = int_matvec(layer.W[gate], x_q)
        acc_h = int_matvec(layer.U[gate], h_q)
        pre = layer.rq_W[gate](acc_x, 32) + layer.rq_U[gate](acc_h, 32) + layer.b[gate]
        return np.clip(pre, -PRE_ACT_LIMIT, PRE_ACT_LIMIT)

    def _run_layer(self, layer: _IntLayer, seq: np.ndarray) -> np.ndarray:
        batch, steps, _ = seq.shape
        h_q = np.zeros((batch, layer.hidden), dtype=np.int64)
        out = np.empty((batch, steps, layer.hidden), dtype=np.int64)
        for t in range(steps):
            x_q = seq[:, t, :]
            z = lut_activation("sigmoid", self._pre(layer, "z", x_q, h_q), table=self.sigmoid)
            r = lut_activation("sigmoid", self._pre(layer, "r", x_q, h_q), table=self.sigmoid)
            rh = (r * h_q + (1 << 14)) >> 15
            pre_h = np.clip(layer.rq_W["h"](int_matvec(layer.W["h"], x_q), 32)
                            + layer.rq_U["h"](int_matvec(layer.U["h"], rh), 32)
                            + layer.b["h"], -PRE_ACT_LIMIT, PRE_ACT_LIMIT)
            # blend in Q15, then round the new state onto the site scale
            cand = lut_activation("tanh", pre_h, table=self.tanh)
            h15 = layer.rq_q15(h_q, 16)
            h15 = _saturate(h15 + ((z * (cand - h15) + (1 << 14)) >> 15), Q15_MAX)
            h_q = layer.rq_state(h15, self.bits)
            out[:, t, :] = h_q
        return out

    def infer(self, tpsf: Tensor) -> Tensor:
        x = np.asarray(tpsf, dtype=np.float64)
        batched = x.ndim == 2
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.qmodel.config.seq_len:
            raise ShapeError(f"Expected sequences of length {self.qmodel.config.seq_len}, got {np.shape(tpsf)}")
        seq = self.quantize_input(x)[:, :, None]
        for layer in self.layers:
            seq = self._run_layer(layer, seq)
        acc = int_matvec(self.dense_W, seq.reshape(-1, seq.shape[-1])).reshape(seq.shape[0], seq.shape[1])
        out = acc.astype(np.float64) * self.out_scale + self.dense_b[0]
        return out if batched else out[0]


def build_engine(qmodel: QuantizedModel) -> IntegerEngine:
    if qmodel._engine is None:
        qmodel._engine = IntegerEngine(qmodel)
        logger.debug(f"Built {qmodel.bits}-bit integer engine for {qmodel.config.label}")
    return qmodel._engine


def int_infer(qmodel: QuantizedModel, tpsf: Tensor, batch_size: int = 512) -> Tensor:
    """Run the integer engine on one TPSF (seq_len,) or a batch (B, seq_len)."""
    if not isinstance(qmodel, QuantizedModel):
        raise QuantizationError("model not quantized")
    engine = build_engine(qmodel)
    x = np.asarray(tpsf, dtype=np.float64)
    if x.ndim == 1:
        return engine.infer(x)
    if x.shape[0] == 0:
        return np.zeros((0, qmodel.config.seq_len))
    return np.concatenate([engine.infer(x[s:s + batch_size]) for s in range(0, x.shape[0], batch_size)], axis=0)
