"""Binary model and calibration-stats files.

Layout, little-endian throughout:

    "ERNN"  uint32 version
    section*   4-byte tag, uint64 length, payload
    uint32  CRC-32 of every preceding byte

Sections: TOPO (canonical topology YAML), MODE (quantization mode), TENS
(tensor records), ACTS (integer-model activation scales), OBSV (calibration
ranges, stats files only). Unknown tags are skipped.

Tensor record:

    uint16 id length, id (utf-8)
    uint8 dtype code, uint8 layout (0 dense, 1 block-sparse), uint8 ndim, uint32 dims
    uint8 has_params [float64 scale, uint8 bit width]
    dense: raw values
    block-sparse: uint32 block rows, uint32 block cols, uint8 ledger dtype code,
                  uint32 ledger length, uint32 stored blocks, ledger, block data
"""

from __future__ import annotations

import logging
import struct
import zlib
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .blocksparse import BlockSparseMatrix, ledger_dtype
from .calibrate import RangeObserver, TensorRange, stored_activation_ids
from .errors import ChecksumError, ModelFormatError, VersionError
from .fixedpoint import QuantizedTensor, QuantParams
from .rnnt import QuantMode, RnntModel, Tensor
from .topology import TensorSpec, TopologyConfig, parse_topology_text, tensor_specs, with_sparsity

logger = logging.getLogger(__name__)

MAGIC = b"ERNN"
VERSION = 1
SECTION = struct.Struct("<4sQ")
PARAMS = struct.Struct("<dB")
BCSR_HEADER = struct.Struct("<IIBII")
CHECKSUM_SIZE = 4
PREAMBLE_SIZE = len(MAGIC) + 4

DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.int8): 1,
    np.dtype(np.int16): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.uint16): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _pack_id(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def _encode_tensor(name: str, t: Tensor) -> bytes:
    params: QuantParams | None = getattr(t, "params", None)
    if isinstance(t, BlockSparseMatrix):
        layout, dims, data = 1, t.shape, t.data
    else:
        layout = 0
        data = t.data if isinstance(t, QuantizedTensor) else np.asarray(t, dtype=np.float32)
        dims = data.shape
    dtype = np.dtype(np.float32) if params is None else np.dtype(params.dtype)
    parts = [
        _pack_id(name),
        struct.pack("<BBB", DTYPE_CODES[dtype], layout, len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<B", params is not None),
    ]
    if params is not None:
        parts.append(PARAMS.pack(params.scale, params.bit_width))
    if isinstance(t, BlockSparseMatrix):
        ledger = t.ledger.astype(_le(ledger_dtype(t.n_block_cols)))
        ledger_code = DTYPE_CODES[np.dtype(ledger_dtype(t.n_block_cols))]
        parts.append(BCSR_HEADER.pack(t.block_rows, t.block_cols, ledger_code, len(ledger), t.n_stored))
        parts.append(ledger.tobytes())
    parts.append(np.ascontiguousarray(data, dtype=_le(dtype)).tobytes())
    return b"".join(parts)


def _text(raw: bytes | memoryview, what: str) -> str:
    try:
        return bytes(raw).decode()
    except UnicodeDecodeError as e:
        raise ModelFormatError(f"{what} is not valid UTF-8 (byte {e.start})") from None


class _Reader:
    def __init__(self, raw: bytes | memoryview, what: str) -> None:
        self.raw = memoryview(raw)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.raw):
            raise ModelFormatError(f"{self.what}: unexpected end of data at byte {self.pos}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str | struct.Struct) -> tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return _text(self.take(n), f"{self.what}: identifier")

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=_le(dtype)).astype(dtype)

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def _decode_tensor(r: _Reader) -> tuple[str, Tensor]:
    name = r.string()
    code, layout, ndim = r.unpack("<BBB")
    if code not in CODE_DTYPES:
        raise ModelFormatError(f"{name}: unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    dims = r.unpack(f"<{ndim}I")
    (has_params,) = r.unpack("<B")
    params = QuantParams(*r.unpack(PARAMS)) if has_params else None
    if layout == 1:
        br, bc, ledger_code, ledger_len, n_stored = r.unpack(BCSR_HEADER)
        ledger = r.array(CODE_DTYPES[ledger_code], ledger_len)
        data = r.array(dtype, n_stored * br * bc).reshape(n_stored, br, bc)
        return name, BlockSparseMatrix(dims[0], dims[1], br, bc, data, ledger, params)
    if layout != 0:
        raise ModelFormatError(f"{name}: unknown layout {layout}")
    data = r.array(dtype, int(np.prod(dims, dtype=np.int64))).reshape(dims)
    if params is not None:
        return name, QuantizedTensor(data, params)
    return name, data


def _frame(sections: list[tuple[bytes, bytes]]) -> bytes:
    body = MAGIC + struct.pack("<I", VERSION)
    body += b"".join(SECTION.pack(tag, len(payload)) + payload for tag, payload in sections)
    return body + struct.pack("<I", zlib.crc32(body))


def _unframe(raw: bytes, where: str) -> dict[bytes, memoryview]:
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{where}: not an ernn file (bad magic {bytes(raw[:4])!r})")
    if len(raw) < PREAMBLE_SIZE + CHECKSUM_SIZE:
        raise ChecksumError(f"{where}: file is truncated")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - CHECKSUM_SIZE)
    if zlib.crc32(raw[:-CHECKSUM_SIZE]) != stored:
        raise ChecksumError(f"{where}: checksum mismatch", hint="the file is truncated or corrupted")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"{where}: format version {version} is not supported (expected {VERSION})")
    r = _Reader(memoryview(raw)[PREAMBLE_SIZE:-CHECKSUM_SIZE], where)
    sections: dict[bytes, memoryview] = {}
    while not r.done:
        tag, length = r.unpack(SECTION)
        payload = r.take(length)
        if tag in sections:
            raise ModelFormatError(f"{where}: duplicate {tag.decode(errors='replace')} section")
        sections[tag] = payload
    return sections


def _require(sections: dict[bytes, memoryview], tag: bytes, where: str) -> memoryview:
    if tag not in sections:
        raise ModelFormatError(f"{where}: missing {tag.decode()} section")
    return sections[tag]


def encode_model(model: RnntModel) -> bytes:
    records = [_encode_tensor(s.name, model.tensors[s.name]) for s in tensor_specs(model.topology)]
    sections = [
        (b"TOPO", model.topology.canonical_text().encode()),
        (b"MODE", model.mode.value.encode()),
        (b"TENS", struct.pack("<I", len(records)) + b"".join(records)),
    ]
    if model.mode is QuantMode.INTEGER:
        acts = sorted(model.activations.items())
        entries = b"".join(_pack_id(k) + PARAMS.pack(p.scale, p.bit_width) for k, p in acts)
        sections.append((b"ACTS", struct.pack("<I", len(acts)) + entries))
    return _frame(sections)


def decode_model(raw: bytes, where: str = "<bytes>") -> RnntModel:
    sections = _unframe(raw, where)
    topology = parse_topology_text(_text(_require(sections, b"TOPO", where), f"{where}: topology"))
    mode_text = _text(_require(sections, b"MODE", where), f"{where}: mode")
    try:
        mode = QuantMode(mode_text)
    except ValueError:
        raise ModelFormatError(f"{where}: unknown quantization mode {mode_text!r}") from None
    r = _Reader(_require(sections, b"TENS", where), where)
    (count,) = r.unpack("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name, t = _decode_tensor(r)
        if name in tensors:
            raise ModelFormatError(f"{where}: tensor {name} appears more than once")
        tensors[name] = t
    activations = {}
    if b"ACTS" in sections:
        a = _Reader(sections[b"ACTS"], where)
        (n,) = a.unpack("<I")
        for _ in range(n):
            key = a.string()
            activations[key] = QuantParams(*a.unpack(PARAMS))
    return RnntModel(topology, mode, tensors, activations)


def save(model: RnntModel, path: str | Path) -> int:
    raw = encode_model(model)
    Path(path).write_bytes(raw)
    logger.info("wrote %s model to %s (%d bytes)", model.mode, path, len(raw))
    return len(raw)


def load(path: str | Path) -> RnntModel:
    """Read a model, verifying magic, checksum, version and tensor completeness."""
    path = Path(path)
    model = decode_model(path.read_bytes(), str(path))
    logger.debug("loaded %s model from %s", model.mode, path)
    return model


def save_stats(obs: RangeObserver, path: str | Path) -> None:
    entries = sorted(obs.ranges.items())
    payload = struct.pack("<I", len(entries)) + b"".join(
        _pack_id(k) + struct.pack("<dddQ", r.max_abs, r.min, r.max, r.count) for k, r in entries
    )
    Path(path).write_bytes(_frame([(b"OBSV", payload)]))
    logger.info("wrote ranges for %d tensors to %s", len(entries), path)


def load_stats(path: str | Path) -> RangeObserver:
    path = Path(path)
    sections = _unframe(path.read_bytes(), str(path))
    r = _Reader(_require(sections, b"OBSV", str(path)), str(path))
    (n,) = r.unpack("<I")
    ranges = {}
    for _ in range(n):
        key = r.string()
        ranges[key] = TensorRange(*r.unpack("<dddQ"))
    return RangeObserver(ranges)


def _tensor_dtype(spec: TensorSpec, mode: QuantMode) -> tuple[int, bool]:
    """(bytes per value, carries QuantParams) for a stored tensor."""
    if mode is QuantMode.FLOAT or spec.role == "joint_bias":
        return 4, False
    if spec.role in ("prunable", "matrix", "embedding"):
        return 1, True
    if mode is QuantMode.INTEGER:
        return (1, True) if spec.role == "gain" else (4, True)
    return 4, False


def _record_size(spec: TensorSpec, mode: QuantMode) -> int:
    itemsize, has_params = _tensor_dtype(spec, mode)
    size = len(_pack_id(spec.name)) + 3 + 4 * len(spec.shape) + 1 + (PARAMS.size if has_params else 0)
    blocks = spec.stored_blocks
    if blocks is None:
        return size + spec.size * itemsize
    rows, cols = spec.shape
    nbc = cols // spec.block[1]
    ledger_len = rows // spec.block[0] + blocks
    ledger_item = np.dtype(ledger_dtype(nbc)).itemsize
    return size + BCSR_HEADER.size + ledger_len * ledger_item + spec.stored_values * itemsize


def file_size_estimate(
    t: TopologyConfig, mode: QuantMode | str, sparsity: Mapping[str, float] | None = None
) -> int:
    """Bytes a model file of this topology takes; `sparsity` may override encoder/prediction targets."""
    mode = QuantMode(mode)
    if sparsity:
        t = with_sparsity(t, sparsity.get("encoder"), sparsity.get("prediction"))
    section_overhead = SECTION.size
    size = PREAMBLE_SIZE + CHECKSUM_SIZE
    size += section_overhead + len(t.canonical_text().encode())
    size += section_overhead + len(mode.value.encode())
    size += section_overhead + 4 + sum(_record_size(s, mode) for s in tensor_specs(t))
    if mode is QuantMode.INTEGER:
        acts = stored_activation_ids(t)
        size += section_overhead + 4 + sum(len(_pack_id(a)) + PARAMS.size for a in acts)
    return size
