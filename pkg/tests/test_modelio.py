"""Model file round trips, corruption handling and size estimates."""

from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest

from ernn import modelio
from ernn.blocksparse import BlockSparseMatrix
from ernn.calibrate import calibrate_model
from ernn.errors import ChecksumError, MissingTensorError, ModelFormatError, VersionError
from ernn.fixedpoint import QuantizedTensor
from ernn.modelio import file_size_estimate, load, load_stats, save, save_stats
from ernn.rnnt import QuantMode, convert_to_hybrid, convert_to_integer, init_random_model, prune_model
from ernn.topology import preset, tensor_specs, with_sparsity


def assert_same_tensor(a, b):
    assert type(a) is type(b)
    if isinstance(a, BlockSparseMatrix):
        assert (a.rows, a.cols, a.block_rows, a.block_cols) == (b.rows, b.cols, b.block_rows, b.block_cols)
        assert np.array_equal(a.ledger, b.ledger) and a.ledger.dtype == b.ledger.dtype
        assert np.array_equal(a.data, b.data) and a.data.dtype == b.data.dtype
        assert a.params == b.params
    elif isinstance(a, QuantizedTensor):
        assert a.params == b.params
        assert np.array_equal(a.data, b.data) and a.data.dtype == b.data.dtype
    else:
        assert np.array_equal(a, b) and a.dtype == b.dtype


def assert_same_model(a, b):
    assert a.mode == b.mode
    assert a.topology == b.topology
    assert a.activations == b.activations
    assert a.tensors.keys() == b.tensors.keys()
    for name in a.tensors:
        assert_same_tensor(a.tensors[name], b.tensors[name])


@pytest.fixture(scope="module")
def sparse_model(tiny_model):
    return prune_model(tiny_model, 0.5, 0.5)


@pytest.fixture(scope="module")
def models(tiny_model, sparse_model, utterances):
    out = {}
    for label, m in (("dense", tiny_model), ("sparse", sparse_model)):
        out[f"float-{label}"] = m
        out[f"hybrid-{label}"] = convert_to_hybrid(m)
        out[f"integer-{label}"] = convert_to_integer(m, calibrate_model(m, utterances))
    return out


MODEL_KINDS = [f"{mode}-{layout}" for mode in ("float", "hybrid", "integer") for layout in ("dense", "sparse")]


class TestRoundTrip:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_bitwise(self, tmp_path, models, kind):
        path = tmp_path / "m.ernn"
        save(models[kind], path)
        assert_same_model(load(path), models[kind])

    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_estimate_equals_file_size(self, tmp_path, models, kind):
        model = models[kind]
        assert save(model, tmp_path / "m.ernn") == file_size_estimate(model.topology, model.mode)

    def test_loaded_model_decodes_the_same(self, tmp_path, models, utterances):
        model = models["integer-sparse"]
        save(model, tmp_path / "m.ernn")
        again = load(tmp_path / "m.ernn")
        assert [again.decode(u) for u in utterances] == [model.decode(u) for u in utterances]

    def test_quantization_keeps_param_count(self, models):
        counts = {models[k].param_count() for k in MODEL_KINDS if k.endswith("dense")}
        assert len(counts) == 1

    def test_sparse_stores_fewer_params(self, models):
        assert models["float-sparse"].param_count() < models["float-dense"].param_count()


class TestCorruption:
    @pytest.fixture
    def raw(self, tiny_model):
        return modelio.encode_model(tiny_model)

    def test_truncated(self, tmp_path, raw):
        path = tmp_path / "m.ernn"
        path.write_bytes(raw[:-100])
        with pytest.raises(ChecksumError):
            load(path)

    def test_flipped_byte(self, raw):
        broken = bytearray(raw)
        broken[len(raw) // 2] ^= 0xFF
        with pytest.raises(ChecksumError):
            modelio.decode_model(bytes(broken))

    def test_bad_magic(self, raw):
        with pytest.raises(ModelFormatError):
            modelio.decode_model(b"XXXX" + raw[4:])

    def test_unknown_version(self, raw):
        body = raw[:4] + struct.pack("<I", 99) + raw[8:-4]
        with pytest.raises(VersionError):
            modelio.decode_model(body + struct.pack("<I", zlib.crc32(body)))

    def test_identifier_not_utf8(self, raw):
        body = bytearray(raw[:-4])
        at = body.index(b"joint.b_out")
        body[at] = 0xFF
        body = bytes(body)
        with pytest.raises(ModelFormatError, match="UTF-8"):
            modelio.decode_model(body + struct.pack("<I", zlib.crc32(body)))

    def test_mode_not_utf8(self, tiny_model):
        raw = modelio._frame([(b"TOPO", tiny_model.topology.canonical_text().encode()), (b"MODE", b"\xfe\xff")])
        with pytest.raises(ModelFormatError, match="UTF-8"):
            modelio.decode_model(raw)

    def test_missing_tensor(self, tiny_model):
        specs = tensor_specs(tiny_model.topology)[1:]
        records = [modelio._encode_tensor(s.name, tiny_model.tensors[s.name]) for s in specs]
        raw = modelio._frame(
            [
                (b"TOPO", tiny_model.topology.canonical_text().encode()),
                (b"MODE", b"float32"),
                (b"TENS", struct.pack("<I", len(records)) + b"".join(records)),
            ]
        )
        with pytest.raises(MissingTensorError):
            modelio.decode_model(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load(tmp_path / "absent.ernn")


class TestSizes:
    def test_float_baseline(self):
        assert file_size_estimate(preset("baseline"), "float32") == pytest.approx(466e6, rel=0.10)

    def test_hybrid_ratio(self):
        t = preset("baseline")
        ratio = file_size_estimate(t, "hybrid8") / file_size_estimate(t, "float32")
        assert ratio == pytest.approx(117 / 466, rel=0.10)

    def test_sparse_hybrid_ratio(self):
        t = preset("baseline")
        sparse = file_size_estimate(t, QuantMode.HYBRID, {"encoder": 0.5, "prediction": 0.5})
        assert sparse / file_size_estimate(t, "float32") == pytest.approx(71 / 466, rel=0.15)

    def test_sparsity_override_equals_sparse_topology(self):
        t = preset("cifg")
        assert file_size_estimate(t, "integer8_16", {"encoder": 0.7}) == file_size_estimate(
            with_sparsity(t, 0.7, None), "integer8_16"
        )


def test_stats_round_trip(tmp_path, observer):
    path = tmp_path / "calib.stats"
    save_stats(observer, path)
    loaded = load_stats(path)
    assert loaded.ranges == observer.ranges
    assert loaded.finalize() == observer.finalize()


def test_stats_file_is_not_a_model(tmp_path, observer):
    path = tmp_path / "calib.stats"
    save_stats(observer, path)
    with pytest.raises(ModelFormatError):
        load(path)


def test_init_model_is_seeded(tiny_topology):
    a, b = init_random_model(tiny_topology, seed=3), init_random_model(tiny_topology, seed=3)
    assert_same_model(a, b)
