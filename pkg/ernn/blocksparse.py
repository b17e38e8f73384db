"""Block-sparse matrix storage (BCSR variant) and matrix-vector kernels.

Stored form:
    data    non-zero blocks in row-major block order, shape (n_stored, block_rows, block_cols)
    ledger  for each block row: count of stored blocks, then their block-column
            indices in strictly increasing order

A block is stored iff at least one of its entries is non-zero (exact test).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import LedgerError, QuantizationError, ShapeError
from .fixedpoint import QuantizedTensor, QuantParams, quantize_symmetric

DEFAULT_BLOCK = (16, 1)
# 127 * 127 * 2^16 < 2^31 keeps int8 products summable in an int32 accumulator.
MAX_QUANTIZED_COLS = 2**16


def ledger_dtype(n_block_cols: int) -> type[np.unsignedinteger] | type[np.signedinteger]:
    return np.uint16 if n_block_cols <= np.iinfo(np.uint16).max else np.int32


def padded_shape(rows: int, cols: int, block_rows: int, block_cols: int) -> tuple[int, int]:
    return -(-rows // block_rows) * block_rows, -(-cols // block_cols) * block_cols


def pad_to_blocks(w: np.ndarray, block_rows: int, block_cols: int) -> np.ndarray:
    """Zero-pad rows and columns up to multiples of the block shape."""
    w = np.asarray(w)
    pr, pc = padded_shape(*w.shape, block_rows, block_cols)
    if (pr, pc) == w.shape:
        return w
    out = np.zeros((pr, pc), dtype=w.dtype)
    out[: w.shape[0], : w.shape[1]] = w
    return out


@dataclass(frozen=True, eq=False)
class BlockSparseMatrix:
    rows: int
    cols: int
    block_rows: int
    block_cols: int
    data: np.ndarray
    ledger: np.ndarray
    params: QuantParams | None = None

    def __post_init__(self) -> None:
        self.validate()

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def block_shape(self) -> tuple[int, int]:
        return self.block_rows, self.block_cols

    @property
    def n_block_rows(self) -> int:
        return self.rows // self.block_rows

    @property
    def n_block_cols(self) -> int:
        return self.cols // self.block_cols

    @property
    def n_stored(self) -> int:
        return int(self.data.shape[0])

    @property
    def is_quantized(self) -> bool:
        return self.params is not None

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes + self.ledger.nbytes)

    def validate(self) -> None:
        errors = []
        if min(self.rows, self.cols, self.block_rows, self.block_cols) <= 0:
            raise ShapeError(f"dimensions must be positive, got {self.shape} / {self.block_shape}")
        if self.rows % self.block_rows or self.cols % self.block_cols:
            raise ShapeError(
                f"{self.rows}x{self.cols} is not divisible by block {self.block_rows}x{self.block_cols}"
            )
        if self.data.ndim != 3 or self.data.shape[1:] != self.block_shape:
            errors.append(
                f"data must have shape (n, {self.block_rows}, {self.block_cols}), got {self.data.shape}"
            )
        if self.ledger.ndim != 1:
            errors.append("ledger must be one-dimensional")
        if errors:
            raise LedgerError("invalid block-sparse matrix", errors)
        counts, _, cols = self._structure
        if int(counts.sum()) != self.n_stored:
            raise LedgerError(
                "ledger/data mismatch",
                [f"ledger lists {int(counts.sum())} blocks but data holds {self.n_stored}"],
            )
        if self.params is not None:
            if not np.issubdtype(self.data.dtype, np.integer):
                raise QuantizationError("quantized block data must be integer")
            if self.cols > MAX_QUANTIZED_COLS:
                raise QuantizationError(
                    f"{self.cols} columns overflow the int32 accumulator guarantee "
                    f"(at most {MAX_QUANTIZED_COLS})"
                )

    @cached_property
    def _structure(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Parse the ledger into (counts per block row, block row per block, block col per block)."""
        ledger = self.ledger.astype(np.int64)
        counts = np.zeros(self.n_block_rows, dtype=np.int64)
        col_parts = []
        pos = 0
        for r in range(self.n_block_rows):
            if pos >= len(ledger):
                raise LedgerError(
                    "corrupt ledger", [f"ledger ends before block row {r} (length {len(ledger)})"]
                )
            count = int(ledger[pos])
            idx = ledger[pos + 1 : pos + 1 + count]
            if len(idx) != count:
                raise LedgerError(
                    "corrupt ledger", [f"block row {r} declares {count} blocks, ledger has {len(idx)}"]
                )
            if count and (idx[-1] >= self.n_block_cols or np.any(np.diff(idx) <= 0)):
                raise LedgerError(
                    "corrupt ledger",
                    [f"block row {r} indices must be strictly increasing and < {self.n_block_cols}"],
                )
            counts[r] = count
            col_parts.append(idx)
            pos += 1 + count
        if pos != len(ledger):
            raise LedgerError("corrupt ledger", [f"{len(ledger) - pos} trailing ledger entries"])
        rows = np.repeat(np.arange(self.n_block_rows), counts)
        cols = np.concatenate(col_parts) if col_parts else np.zeros(0, dtype=np.int64)
        return counts, rows, cols

    @cached_property
    def kernel_data(self) -> np.ndarray:
        """Block payload as float64, built once; exact for int8 and float32 data."""
        data = self.data.astype(np.float64)
        data.setflags(write=False)
        return data

    def quantized(self) -> BlockSparseMatrix:
        """8-bit copy with the same ledger; the scale covers the whole matrix."""
        if self.is_quantized:
            raise QuantizationError("matrix is already quantized")
        q = quantize_symmetric(self.data, 8)
        return BlockSparseMatrix(
            self.rows, self.cols, self.block_rows, self.block_cols, q.data, self.ledger, q.params
        )

    def dequantized(self) -> BlockSparseMatrix:
        if not self.is_quantized:
            return self
        data = self.data.astype(np.float64) * self.params.scale
        return BlockSparseMatrix(
            self.rows, self.cols, self.block_rows, self.block_cols, data, self.ledger
        )


def from_dense(
    w: np.ndarray,
    block_rows: int = DEFAULT_BLOCK[0],
    block_cols: int = DEFAULT_BLOCK[1],
    *,
    params: QuantParams | None = None,
) -> BlockSparseMatrix:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    rows, cols = w.shape
    if rows % block_rows or cols % block_cols:
        pr, pc = padded_shape(rows, cols, block_rows, block_cols)
        raise ShapeError(
            f"{rows}x{cols} is not divisible by block {block_rows}x{block_cols}",
            hint=f"pad to {pr}x{pc} with pad_to_blocks first",
        )
    nbr, nbc = rows // block_rows, cols // block_cols
    blocks = w.reshape(nbr, block_rows, nbc, block_cols).transpose(0, 2, 1, 3)
    nonzero = (blocks != 0).any(axis=(2, 3))
    data = np.ascontiguousarray(blocks[nonzero])
    pieces = []
    for r in range(nbr):
        idx = np.flatnonzero(nonzero[r])
        pieces.append([len(idx)])
        pieces.append(idx)
    ledger = np.concatenate(pieces).astype(ledger_dtype(nbc))
    return BlockSparseMatrix(rows, cols, block_rows, block_cols, data, ledger, params)


def from_quantized(t: QuantizedTensor, block_rows: int, block_cols: int) -> BlockSparseMatrix:
    return from_dense(t.data, block_rows, block_cols, params=t.params)


def to_dense(m: BlockSparseMatrix) -> np.ndarray:
    _, rows, cols = m._structure
    out = np.zeros((m.n_block_rows, m.n_block_cols, m.block_rows, m.block_cols), dtype=m.data.dtype)
    out[rows, cols] = m.data
    return out.transpose(0, 2, 1, 3).reshape(m.rows, m.cols)


def _block_products(m: BlockSparseMatrix, x: np.ndarray) -> np.ndarray:
    # float64 sums of int8 products stay exact: |y| <= 2^16 * 2^14 < 2^53
    counts, _, cols = m._structure
    y = np.zeros((m.n_block_rows, m.block_rows), dtype=np.float64)
    if m.n_stored == 0:
        return y.reshape(m.rows)
    xb = x.reshape(m.n_block_cols, m.block_cols)[cols].astype(np.float64, copy=False)
    contrib = np.einsum("kij,kj->ki", m.kernel_data, xb)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    nonempty = counts > 0
    y[nonempty] = np.add.reduceat(contrib, starts[nonempty], axis=0)
    return y.reshape(m.rows)


def _check_input(m: BlockSparseMatrix, x: np.ndarray) -> None:
    if x.ndim != 1 or x.shape[0] != m.cols:
        raise ShapeError(f"input length {x.shape} does not match {m.cols} columns")


def matvec(m: BlockSparseMatrix, x: np.ndarray) -> np.ndarray:
    """y = to_dense(m) @ x; skipped blocks contribute exactly zero."""
    x = np.asarray(x)
    _check_input(m, x)
    if m.is_quantized:
        raise QuantizationError("use matvec_quantized for 8-bit matrices")
    return _block_products(m, x)


def matvec_quantized(m: BlockSparseMatrix, x: QuantizedTensor) -> np.ndarray:
    """Integer-exact int8 x int8 product with int32 accumulators (scale s_W * s_x)."""
    if not m.is_quantized:
        raise QuantizationError("matrix is not quantized")
    if x.params.bit_width != 8:
        raise QuantizationError(f"expected an 8-bit input, got {x.params.bit_width}-bit")
    _check_input(m, x.data)
    return _block_products(m, x.data).astype(np.int32)


def sparsity(m: BlockSparseMatrix) -> float:
    """Fraction of block positions that are not stored."""
    return 1.0 - m.n_stored / (m.n_block_rows * m.n_block_cols)
