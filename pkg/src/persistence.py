"""
Versioned binary persistence.

ModelFile (little-endian):
    magic "FLIQ1" | version u16 | manifest_len u32 | manifest JSON |
    n_tensors u32 | per tensor: name_len u16, name, dtype u8, rank u8,
    dims u32[rank], scale f32, payload

DatasetFile (little-endian):
    magic "FLID1" | version u16 | n_records u32 | n_gates u32 |
    gate_width_ns f32 | seed u64 | per record: tpsf f32[n], sfd f32[n],
    a_r f32, tau1 f32, tau2 f32, peak_counts f32

The FPGA export writes one raw little-endian binary per tensor plus a JSON manifest.
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from src.datagen import GENERATOR_VERSION, DecayParams, DecayRecord, FliDataset, TimeGrid
from src.errors import (BadMagicError, ConfigError, DataFormatError, ManifestError, QuantizationError,
                        ShapeError, TruncatedFileError, VersionMismatchError)
from src.gru_model import ModelConfig, SeqModel
from src.int_engine import PRE_ACT_SCALE, quantize_bias
from src.quant import CalibrationStats, QuantizedModel, QuantizedTensor, QuantMode, is_bias

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"FLIQ1"
DATASET_MAGIC = b"FLID1"
MODEL_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1
FPGA_FORMAT_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i1"), 2: np.dtype("<i2")}
CODE_FOR_DTYPE = {np.dtype("<f4"): 0, np.dtype("<i1"): 1, np.dtype("<i2"): 2}
LUT_PREFIX = "lut."

_DATASET_HEADER = struct.Struct("<5sHIIfQ")
_RECORD_TAIL = struct.Struct("<ffff")


class ModelManifest(BaseModel):
    """Architecture and quantization metadata embedded in a ModelFile."""
    kind: str
    enc_hidden: list[int]
    seq_len: int = Field(..., ge=1)
    input_dim: int = 1
    output_dim: int = 1
    quantized: bool = False
    bits: Optional[int] = None
    mode: Optional[str] = None
    activation_scales: dict[str, float] = {}
    running_max: dict[str, float] = {}
    ema_decay: Optional[float] = None
    calib_batches: int = 0
    calib_records: int = 0
    seed: int = 0
    generator_version: int = GENERATOR_VERSION
    provenance: dict[str, Any] = {}

    def to_model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.model_dump())
        except (ConfigError, ValueError) as e:
            raise ManifestError(f"Manifest describes an invalid architecture: {e}")


class FpgaTensorEntry(BaseModel):
    name: str
    file: str
    dtype: str
    dims: list[int]
    bits: int
    scale: float
    bytes: int = Field(..., ge=0)
    role: str = "weight"


class FpgaManifest(BaseModel):
    format_version: int = FPGA_FORMAT_VERSION
    model: dict[str, Any]
    bits: int
    mode: str
    pre_activation_shift: int
    activation_scales: dict[str, float]
    ema_decay: float
    calib_records: int = 0
    seed: int = 0
    tensors: list[FpgaTensorEntry]
    total_bytes: int


def _atomic_write(path: Union[str, Path], payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over a byte buffer that reports truncation with context."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, where: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"File truncated at {where}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, where: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), where))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _tensor_table(model: Union[SeqModel, QuantizedModel]) -> List[Tuple[str, np.ndarray, float]]:
    if isinstance(model, QuantizedModel):
        entries = [(name, qt.q.astype(DTYPE_CODES[1 if model.bits == 8 else 2]), float(qt.scale))
                   for name, qt in model.weights.items()]
        entries += [(name, b.astype("<f4"), 0.0) for name, b in model.biases.items()]
        entries += [(f"{LUT_PREFIX}{kind}", lut.astype("<i2"), 2.0 ** -15) for kind, lut in model.luts.items()]
    else:
        entries = [(name, t.astype("<f4"), 0.0) for name, t in model.parameters().items()]
    return sorted(entries, key=lambda e: e[0])


def _manifest_for(model: Union[SeqModel, QuantizedModel], provenance: Optional[Dict[str, Any]]) -> ModelManifest:
    fields: Dict[str, Any] = dict(model.config.to_dict())
    fields["provenance"] = dict(provenance or {})
    if isinstance(model, QuantizedModel):
        fields.update(
            quantized=True,
            bits=model.bits,
            mode=model.mode.value,
            activation_scales=dict(model.stats.scales),
            running_max=dict(model.stats.running),
            ema_decay=model.stats.decay,
            calib_batches=model.stats.batches,
            calib_records=model.calib_records,
            seed=model.seed,
        )
    else:
        fields["seed"] = int(fields["provenance"].get("seed", 0))
    return ModelManifest(**fields)


def encode_model(model: Union[SeqModel, QuantizedModel], provenance: Optional[Dict[str, Any]] = None) -> bytes:
    manifest = _manifest_for(model, provenance).model_dump_json().encode("utf-8")
    table = _tensor_table(model)
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_FORMAT_VERSION, len(manifest)), manifest,
             struct.pack("<I", len(table))]
    for name, array, scale in table:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", CODE_FOR_DTYPE[array.dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<f", scale))
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def save_model(model: Union[SeqModel, QuantizedModel], path: Union[str, Path],
               provenance: Optional[Dict[str, Any]] = None) -> None:
    """Write a float or quantized model; float tensors are stored as float32."""
    payload = encode_model(model, provenance)
    _atomic_write(path, payload)
    logger.info(f"Saved {'quantized' if isinstance(model, QuantizedModel) else 'float'} model "
                f"{model.config.label} to {path} ({len(payload)} bytes)")


def _read_header(reader: _Reader) -> ModelManifest:
    magic = reader.data[:len(MODEL_MAGIC)]
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    reader.pos = len(MODEL_MAGIC)
    (version,) = reader.unpack("<H", "version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"Model format version {version} is not supported (expected {MODEL_FORMAT_VERSION})")
    (manifest_len,) = reader.unpack("<I", "manifest length")
    raw = reader.take(manifest_len, "manifest")
    try:
        return ModelManifest.model_validate_json(raw)
    except ValidationError as e:
        raise ManifestError(f"Manifest does not parse: {e}")


def _read_tensors(reader: _Reader) -> Dict[str, Tuple[np.ndarray, float]]:
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, Tuple[np.ndarray, float]] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"tensor #{index} name")
        raw_name = reader.take(name_len, f"tensor #{index} name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ManifestError(f"Tensor #{index} name is not valid UTF-8: {e}")
        code, rank = reader.unpack("<BB", f"tensor {name}")
        if code not in DTYPE_CODES:
            raise ManifestError(f"Tensor {name} has unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I", f"tensor {name}")
        (scale,) = reader.unpack("<f", f"tensor {name}")
        dtype = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f"tensor {name}")
        tensors[name] = (np.frombuffer(payload, dtype=dtype).reshape(dims).copy(), scale)
    if reader.remaining:
        raise DataFormatError(f"{reader.remaining} unexpected trailing bytes after the tensor table")
    return tensors


def read_manifest(path: Union[str, Path]) -> ModelManifest:
    return _read_header(_Reader(Path(path).read_bytes()))


def decode_model(data: bytes) -> Union[SeqModel, QuantizedModel]:
    reader = _Reader(data)
    manifest = _read_header(reader)
    tensors = _read_tensors(reader)
    config = manifest.to_model_config()

    names = set(tensors)
    if not manifest.quantized:
        if names != set(_expected_tensor_names(config)):
            raise ManifestError(f"Tensor set differs from the {config.label} architecture")
        params = {name: array.astype(np.float64) for name, (array, _) in tensors.items()}
        try:
            return SeqModel.from_parameters(config, params)
        except (ShapeError, KeyError) as e:
            raise ManifestError(f"Tensors do not match the manifest architecture: {e}")

    if manifest.bits not in (8, 16) or manifest.mode is None:
        raise ManifestError(f"Quantized manifest has bits={manifest.bits}, mode={manifest.mode}")
    weight_dtype = DTYPE_CODES[1 if manifest.bits == 8 else 2]
    weights: Dict[str, QuantizedTensor] = {}
    biases: Dict[str, np.ndarray] = {}
    luts: Dict[str, np.ndarray] = {}
    for name, (array, scale) in tensors.items():
        if name.startswith(LUT_PREFIX):
            luts[name[len(LUT_PREFIX):]] = array.astype(np.int16)
        elif is_bias(name):
            biases[name] = array.astype(np.float32)
        else:
            if array.dtype != weight_dtype:
                raise ManifestError(f"Tensor {name} is {array.dtype}, manifest says {manifest.bits}-bit")
            weights[name] = QuantizedTensor(q=array.astype(np.int8 if manifest.bits == 8 else np.int16), scale=float(scale),
                                            bits=manifest.bits)
    expected = set(_expected_tensor_names(config))
    present = set(weights) | set(biases)
    if present != expected:
        raise ManifestError(f"Tensor set differs from the architecture: missing {sorted(expected - present)}, "
                            f"extra {sorted(present - expected)}")
    if set(luts) != {"sigmoid", "tanh"}:
        raise ManifestError(f"Quantized model needs sigmoid and tanh LUTs, found {sorted(luts)}")
    stats = CalibrationStats(decay=manifest.ema_decay if manifest.ema_decay is not None else CalibrationStats().decay,
                             running=dict(manifest.running_max), scales=dict(manifest.activation_scales),
                             batches=manifest.calib_batches)
    return QuantizedModel(config=config, bits=manifest.bits, mode=QuantMode(manifest.mode), weights=weights,
                          biases=biases, stats=stats, luts=luts, calib_records=manifest.calib_records,
                          seed=manifest.seed)


def _expected_tensor_names(config: ModelConfig) -> List[str]:
    names = []
    for prefix, layers in (("encoder", config.enc_hidden), ("decoder", config.dec_hidden)):
        for i in range(len(layers)):
            names += [f"{prefix}.{i}.{kind}_{gate}" for kind in ("W", "U", "b") for gate in ("z", "r", "h")]
    return names + ["dense.W", "dense.b"]


def load_model(path: Union[str, Path]) -> Union[SeqModel, QuantizedModel]:
    """
    Read a ModelFile.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedFileError, ManifestError
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Model file not found: {path}")
    model = decode_model(path.read_bytes())
    logger.info(f"Loaded {'quantized' if isinstance(model, QuantizedModel) else 'float'} model "
                f"{model.config.label} from {path}")
    return model


def encode_dataset(dataset: FliDataset) -> bytes:
    n = dataset.grid.n_gates
    parts = [_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_FORMAT_VERSION, len(dataset), n,
                                  dataset.grid.gate_width_ns, int(dataset.seed))]
    for record in dataset.records:
        parts.append(np.asarray(record.tpsf, dtype="<f4").tobytes())
        parts.append(np.asarray(record.sfd, dtype="<f4").tobytes())
        parts.append(_RECORD_TAIL.pack(record.params.a_r, record.params.tau1_ns, record.params.tau2_ns,
                                       record.peak_counts))
    return b"".join(parts)


def save_dataset(dataset: FliDataset, path: Union[str, Path]) -> None:
    dataset.validate()
    payload = encode_dataset(dataset)
    _atomic_write(path, payload)
    logger.info(f"Saved {len(dataset)} records x {dataset.grid.n_gates} gates to {path} ({len(payload)} bytes)")


def decode_dataset(data: bytes, source: str = "file") -> FliDataset:
    if len(data) < len(DATASET_MAGIC) or data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {data[:len(DATASET_MAGIC)]!r}, expected {DATASET_MAGIC!r}")
    if len(data) < _DATASET_HEADER.size:
        raise TruncatedFileError("Dataset file truncated in header")
    _, version, n_records, n_gates, gate_width, seed = _DATASET_HEADER.unpack_from(data)
    if version != DATASET_FORMAT_VERSION:
        raise VersionMismatchError(f"Dataset format version {version} is not supported")
    if not gate_width > 0:
        raise DataFormatError(f"gate_width_ns must be positive, got {gate_width}")
    record_size = 8 * n_gates + _RECORD_TAIL.size
    expected = _DATASET_HEADER.size + n_records * record_size
    if len(data) != expected:
        raise TruncatedFileError(
            f"Dataset header declares {n_records} records ({expected} bytes) but the file has {len(data)} bytes")

    grid = TimeGrid(n_gates=n_gates, gate_width_ns=float(gate_width))
    if n_records == 0:
        return FliDataset(grid=grid, records=[], seed=int(seed), source=source)
    floats = np.frombuffer(data, dtype="<f4", offset=_DATASET_HEADER.size).reshape(n_records, 2 * n_gates + 4)
    records = []
    for row in floats.astype(np.float64):
        a_r, tau1, tau2, peak = row[2 * n_gates:]
        records.append(DecayRecord(params=DecayParams(a_r=float(a_r), tau1_ns=float(tau1), tau2_ns=float(tau2)),
                                   tpsf=row[:n_gates].copy(), sfd=row[n_gates:2 * n_gates].copy(),
                                   peak_counts=float(peak)))
    return FliDataset(grid=grid, records=records, seed=int(seed), source=source)


def load_dataset(path: Union[str, Path]) -> FliDataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Dataset file not found: {path}")
    dataset = decode_dataset(path.read_bytes(), source=path.name)
    logger.info(f"Loaded {len(dataset)} records x {dataset.grid.n_gates} gates from {path}")
    return dataset


def _export_entries(qmodel: QuantizedModel) -> List[Tuple[FpgaTensorEntry, np.ndarray]]:
    entries = []
    weight_dtype = "<i1" if qmodel.bits == 8 else "<i2"
    for name in sorted(qmodel.weights):
        qt = qmodel.weights[name]
        array = qt.q.astype(weight_dtype)
        entries.append((FpgaTensorEntry(name=name, file=f"{name}.bin", dtype=weight_dtype[1:], dims=list(array.shape),
                                        bits=qmodel.bits, scale=qt.scale, bytes=array.nbytes), array))
    for name in sorted(qmodel.biases):
        if name == "dense.b":
            # the head bias stays float: the output stage dequantizes before adding it
            array = qmodel.biases[name].astype("<f4")
            entry = FpgaTensorEntry(name=name, file=f"{name}.bin", dtype="f4", dims=list(array.shape),
                                    bits=32, scale=0.0, bytes=array.nbytes, role="bias")
        else:
            array = quantize_bias(qmodel.biases[name]).astype("<i4")
            entry = FpgaTensorEntry(name=name, file=f"{name}.bin", dtype="i4", dims=list(array.shape),
                                    bits=32, scale=PRE_ACT_SCALE, bytes=array.nbytes, role="bias")
        entries.append((entry, array))
    for kind in sorted(qmodel.luts):
        array = qmodel.luts[kind].astype("<i2")
        entries.append((FpgaTensorEntry(name=f"{LUT_PREFIX}{kind}", file=f"{LUT_PREFIX}{kind}.bin", dtype="i2",
                                        dims=list(array.shape), bits=16, scale=2.0 ** -15, bytes=array.nbytes,
                                        role="lut"), array))
    return entries


def export_fpga(qmodel: QuantizedModel, out_dir: Union[str, Path]) -> FpgaManifest:
    """
    Write raw little-endian tensor binaries and manifest.json for hardware bring-up.

    Raises:
        QuantizationError: float or uncalibrated model
    """
    if not isinstance(qmodel, QuantizedModel):
        raise QuantizationError("model not quantized")
    if not qmodel.calibrated:
        raise QuantizationError("Model is not calibrated")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = _export_entries(qmodel)
    for entry, array in entries:
        _atomic_write(out_dir / entry.file, np.ascontiguousarray(array).tobytes())
    manifest = FpgaManifest(model=qmodel.config.to_dict(), bits=qmodel.bits, mode=qmodel.mode.value,
                            pre_activation_shift=int(round(-np.log2(PRE_ACT_SCALE))),
                            activation_scales=dict(qmodel.stats.scales), ema_decay=qmodel.stats.decay,
                            calib_records=qmodel.calib_records, seed=qmodel.seed,
                            tensors=[entry for entry, _ in entries],
                            total_bytes=sum(entry.bytes for entry, _ in entries))
    _atomic_write(out_dir / "manifest.json",
                  json.dumps(manifest.model_dump(), indent=2, sort_keys=True).encode("utf-8"))
    logger.info(f"Exported {len(entries)} tensors ({manifest.total_bytes} bytes) to {out_dir}")
    return manifest


def import_fpga(in_dir: Union[str, Path]) -> QuantizedModel:
    """Rebuild a QuantizedModel from an export directory."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"No manifest.json in {in_dir}")
    try:
        manifest = FpgaManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ManifestError(f"Export manifest does not parse: {e}")
    if manifest.format_version != FPGA_FORMAT_VERSION:
        raise VersionMismatchError(f"Export format version {manifest.format_version} is not supported")
    try:
        config = ModelConfig.from_dict(manifest.model)
    except (ConfigError, KeyError, ValueError) as e:
        raise ManifestError(f"Export manifest describes an invalid architecture: {e}")

    weights: Dict[str, QuantizedTensor] = {}
    biases: Dict[str, np.ndarray] = {}
    luts: Dict[str, np.ndarray] = {}
    for entry in manifest.tensors:
        path = in_dir / entry.file
        if not path.exists():
            raise DataFormatError(f"Missing tensor file {entry.file}")
        raw = path.read_bytes()
        if len(raw) != entry.bytes:
            raise TruncatedFileError(f"truncated at tensor {entry.name}: {len(raw)} of {entry.bytes} bytes")
        array = np.frombuffer(raw, dtype=np.dtype(f"<{entry.dtype}")).reshape(entry.dims).copy()
        if entry.role == "lut":
            luts[entry.name[len(LUT_PREFIX):]] = array.astype(np.int16)
        elif entry.role == "bias":
            values = array.astype(np.float64) * entry.scale if entry.dtype == "i4" else array
            biases[entry.name] = np.asarray(values, dtype=np.float32)
        else:
            weights[entry.name] = QuantizedTensor(q=array.astype(np.int8 if entry.bits == 8 else np.int16),
                                                  scale=entry.scale, bits=entry.bits)
    stats = CalibrationStats(decay=manifest.ema_decay, scales=dict(manifest.activation_scales))
    return QuantizedModel(config=config, bits=manifest.bits, mode=QuantMode(manifest.mode), weights=weights,
                          biases=biases, stats=stats, luts=luts, calib_records=manifest.calib_records,
                          seed=manifest.seed)
