#!/usr/bin/env python3
"""
Tests for model/dataset files and the FPGA export directory.
"""

import json
import struct

import numpy as np
import pytest

from src.datagen import DecayParams, DecayRecord, FliDataset, TimeGrid
from src.errors import (BadMagicError, DataFormatError, ManifestError, QuantizationError, TruncatedFileError,
                        VersionMismatchError)
from src.gru_model import ModelConfig, ModelKind, SeqModel, forward, init_model
from src.int_engine import int_infer
from src.persistence import (decode_dataset, decode_model, encode_dataset, encode_model, export_fpga, import_fpga,
                             load_dataset, load_model, read_manifest, save_dataset, save_model)
from src.quant import QuantizedModel, ptq_model


def test_float_model_round_trip(tmp_path, teacher_model, small_dataset):
    path = tmp_path / "teacher.fliq"
    save_model(teacher_model, path, provenance={"seed": 2})
    loaded = load_model(path)
    assert isinstance(loaded, SeqModel)
    assert loaded.config == teacher_model.config
    for name, tensor in teacher_model.parameters().items():
        assert np.allclose(loaded.parameters()[name], tensor.astype(np.float32), atol=0)
    x = small_dataset.tpsf_matrix()
    assert np.max(np.abs(forward(loaded, x)[0] - forward(teacher_model, x)[0])) < 1e-5
    assert read_manifest(path).provenance == {"seed": 2}


def test_quantized_model_round_trip(tmp_path, teacher_model, small_dataset):
    qmodel = ptq_model(teacher_model, 8, small_dataset)
    path = tmp_path / "student.fliq"
    save_model(qmodel, path)
    loaded = load_model(path)
    assert isinstance(loaded, QuantizedModel)
    assert loaded.bits == 8 and loaded.mode == qmodel.mode
    assert loaded.activation_scales == qmodel.activation_scales
    for name, qt in qmodel.weights.items():
        assert np.array_equal(loaded.weights[name].q, qt.q)
        assert loaded.weights[name].scale == qt.scale
    x = small_dataset.tpsf_matrix()
    assert np.array_equal(int_infer(loaded, x), int_infer(qmodel, x))


@pytest.mark.parametrize("bits", [8, 16])
def test_save_load_save_is_byte_identical(tmp_path, lite_model, small_dataset, bits):
    for model in (lite_model, ptq_model(lite_model, bits, small_dataset)):
        first = encode_model(model)
        again = encode_model(decode_model(first))
        assert first == again


def test_bad_magic(tmp_path):
    path = tmp_path / "bogus.fliq"
    path.write_bytes(b"XXXX")
    with pytest.raises(BadMagicError, match="bad magic"):
        load_model(path)


def test_version_mismatch(lite_model):
    data = bytearray(encode_model(lite_model))
    data[5:7] = struct.pack("<H", 2)
    with pytest.raises(VersionMismatchError):
        decode_model(bytes(data))


def test_truncated_model_names_tensor(lite_model):
    data = encode_model(lite_model)
    with pytest.raises(TruncatedFileError, match="truncated at tensor"):
        decode_model(data[:-3])


def test_trailing_bytes_rejected(lite_model):
    with pytest.raises(DataFormatError):
        decode_model(encode_model(lite_model) + b"\x00")


def test_missing_model_file(tmp_path):
    with pytest.raises(DataFormatError):
        load_model(tmp_path / "absent.fliq")


def test_dataset_round_trip(tmp_path, small_dataset):
    path = tmp_path / "data.flid"
    save_dataset(small_dataset, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(small_dataset)
    assert loaded.seed == small_dataset.seed
    assert loaded.grid.n_gates == 32
    assert loaded.grid.gate_width_ns == pytest.approx(small_dataset.grid.gate_width_ns)
    assert loaded.source == "data.flid"
    assert np.allclose(loaded.tpsf_matrix(), small_dataset.tpsf_matrix(), rtol=1e-6, atol=1e-7)
    assert np.allclose(loaded.sfd_matrix(), small_dataset.sfd_matrix(), rtol=1e-6, atol=1e-7)
    assert loaded.records[0].params.tau2_ns == pytest.approx(small_dataset.records[0].params.tau2_ns, rel=1e-6)


def test_dataset_layout_matches_struct_reader(small_dataset):
    data = encode_dataset(small_dataset)
    magic, version, n_records, n_gates, gate_width, seed = struct.unpack_from("<5sHIIfQ", data)
    assert (magic, version, n_records, n_gates, seed) == (b"FLID1", 1, len(small_dataset), 32, small_dataset.seed)
    assert gate_width == pytest.approx(10.0 / 32)
    offset = struct.calcsize("<5sHIIfQ")
    first_tpsf = struct.unpack_from("<32f", data, offset)
    assert np.allclose(first_tpsf, small_dataset.records[0].tpsf, rtol=1e-6, atol=1e-7)
    a_r, tau1, tau2, peak = struct.unpack_from("<4f", data, offset + 2 * 32 * 4)
    assert peak == pytest.approx(small_dataset.records[0].peak_counts)
    assert len(data) == offset + len(small_dataset) * (2 * 32 * 4 + 16)


def test_empty_dataset_round_trip(tmp_path, small_dataset):
    path = tmp_path / "empty.flid"
    save_dataset(small_dataset.subset([]), path)
    assert len(load_dataset(path)) == 0


def test_dataset_length_mismatch(tmp_path, small_dataset):
    path = tmp_path / "short.flid"
    path.write_bytes(encode_dataset(small_dataset)[:-1])
    with pytest.raises(TruncatedFileError):
        load_dataset(path)


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "bad.flid"
    path.write_bytes(b"FLIQ1" + bytes(40))
    with pytest.raises(BadMagicError):
        load_dataset(path)


def test_export_import_is_bit_identical(tmp_path, teacher_model, small_dataset):
    qmodel = ptq_model(teacher_model, 8, small_dataset)
    manifest = export_fpga(qmodel, tmp_path / "fpga")
    files = {entry.file for entry in manifest.tensors}
    assert {"lut.sigmoid.bin", "lut.tanh.bin", "dense.b.bin"} <= files
    assert manifest.total_bytes == sum((tmp_path / "fpga" / f).stat().st_size for f in files)
    on_disk = json.loads((tmp_path / "fpga" / "manifest.json").read_text())
    assert on_disk["bits"] == 8
    assert on_disk["pre_activation_shift"] == 11

    restored = import_fpga(tmp_path / "fpga")
    x = small_dataset.tpsf_matrix()
    assert int_infer(restored, x).tobytes() == int_infer(qmodel, x).tobytes()


def test_export_tensor_sizes(tmp_path, small_dataset):
    model = init_model(ModelConfig(kind=ModelKind.TEACHER, enc_hidden=[64, 16], seq_len=32), 0)
    manifest = export_fpga(ptq_model(model, 8, small_dataset), tmp_path / "fpga")
    by_name = {entry.name: entry for entry in manifest.tensors}
    assert by_name["encoder.1.W_z"].dims == [16, 64]
    assert by_name["encoder.1.W_z"].bytes == 1024
    assert by_name["encoder.1.b_z"].dtype == "i4"
    assert by_name["lut.tanh"].bytes == 2048


def test_export_rejects_float_model(tmp_path, lite_model):
    with pytest.raises(QuantizationError, match="model not quantized"):
        export_fpga(lite_model, tmp_path / "fpga")


def test_import_detects_truncated_tensor(tmp_path, lite_model, small_dataset):
    export_fpga(ptq_model(lite_model, 8, small_dataset), tmp_path / "fpga")
    target = tmp_path / "fpga" / "decoder.0.U_h.bin"
    target.write_bytes(target.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError, match="truncated at tensor decoder.0.U_h"):
        import_fpga(tmp_path / "fpga")


def test_tensor_name_that_is_not_utf8(lite_model):
    data = bytearray(encode_model(lite_model))
    at = bytes(data).rindex(b"decoder.0.U_h")
    data[at] = 0xFF
    with pytest.raises(ManifestError, match="not valid UTF-8"):
        decode_model(bytes(data))


GOLDEN_FLID = bytes.fromhex(
    "464c494431" "0100" "01000000" "02000000" "0000003f" "0700000000000000"
    "0000403f" "0000803f"
    "0000803f" "0000003f"
    "0000803e" "0000003f" "0000803f" "0000fa43")


def _golden_dataset():
    record = DecayRecord(params=DecayParams(a_r=0.25, tau1_ns=0.5, tau2_ns=1.0), sfd=np.array([1.0, 0.5]),
                         tpsf=np.array([0.75, 1.0]), peak_counts=500.0)
    return FliDataset(grid=TimeGrid(n_gates=2, gate_width_ns=0.5), records=[record], seed=7)


def test_dataset_golden_bytes():
    assert encode_dataset(_golden_dataset()) == GOLDEN_FLID
    decoded = decode_dataset(GOLDEN_FLID)
    assert decoded.seed == 7
    assert decoded.grid.n_gates == 2 and decoded.grid.gate_width_ns == 0.5
    assert decoded.records[0].tpsf.tolist() == [0.75, 1.0]
    assert decoded.records[0].sfd.tolist() == [1.0, 0.5]
    params = decoded.records[0].params
    assert (params.a_r, params.tau1_ns, params.tau2_ns, decoded.records[0].peak_counts) == (0.25, 0.5, 1.0, 500.0)


GOLDEN_TENSOR_NAMES = [
    "decoder.0.U_h", "decoder.0.U_r", "decoder.0.U_z", "decoder.0.W_h", "decoder.0.W_r", "decoder.0.W_z",
    "decoder.0.b_h", "decoder.0.b_r", "decoder.0.b_z", "dense.W", "dense.b",
    "encoder.0.U_h", "encoder.0.U_r", "encoder.0.U_z", "encoder.0.W_h", "encoder.0.W_r", "encoder.0.W_z",
    "encoder.0.b_h", "encoder.0.b_r", "encoder.0.b_z",
]


def test_model_golden_layout():
    model = init_model(ModelConfig(kind=ModelKind.LITE, enc_hidden=[1], seq_len=4), 0)
    for tensor in model.parameters().values():
        tensor[...] = 0.5
    data = encode_model(model)

    assert data[:5] == b"FLIQ1"
    version, manifest_len = struct.unpack_from("<HI", data, 5)
    assert version == 1
    manifest = json.loads(data[11:11 + manifest_len])
    assert (manifest["kind"], manifest["enc_hidden"], manifest["seq_len"]) == ("lite", [1], 4)
    assert manifest["quantized"] is False

    expected = struct.pack("<I", len(GOLDEN_TENSOR_NAMES))
    for name in GOLDEN_TENSOR_NAMES:
        dims = (1,) if name.split(".")[-1].startswith("b") else (1, 1)
        expected += struct.pack("<H", len(name)) + name.encode("ascii")
        expected += struct.pack("<BB", 0, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        expected += struct.pack("<f", 0.0) + bytes.fromhex("0000003f")
    assert data[11 + manifest_len:] == expected
