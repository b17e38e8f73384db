"""BCSR storage: construction, ledger validation and the float/int8 kernels."""

from __future__ import annotations

import numpy as np
import pytest

from ernn.blocksparse import (
    MAX_QUANTIZED_COLS,
    BlockSparseMatrix,
    from_dense,
    from_quantized,
    matvec,
    matvec_quantized,
    pad_to_blocks,
    sparsity,
    to_dense,
)
from ernn.errors import LedgerError, QuantizationError, ShapeError
from ernn.fixedpoint import QuantizedTensor, QuantParams, quantize_symmetric


def random_block_sparse(rng, rows, cols, block, keep):
    br, bc = block
    mask = rng.random((rows // br, cols // bc)) < keep
    w = rng.standard_normal((rows, cols)).astype(np.float32)
    return w * np.repeat(np.repeat(mask, br, axis=0), bc, axis=1)


class TestFromDense:
    def test_all_zero(self):
        m = from_dense(np.zeros((16, 4)), 16, 1)
        assert m.n_stored == 0
        assert m.ledger.tolist() == [0]
        assert np.array_equal(to_dense(m), np.zeros((16, 4)))

    def test_identity_stores_every_column(self):
        m = from_dense(np.eye(16), 16, 1)
        assert m.n_stored == 16
        assert m.ledger.tolist() == [16, *range(16)]
        assert np.array_equal(to_dense(m), np.eye(16))

    def test_single_block(self):
        w = np.zeros((32, 2))
        w[:16, 1] = np.arange(1, 17)
        m = from_dense(w, 16, 1)
        assert m.ledger.tolist() == [1, 1, 0]
        assert m.data[0, :, 0].tolist() == list(range(1, 17))
        assert np.array_equal(to_dense(m), w)

    def test_round_trip_bitwise(self, rng):
        for _ in range(100):
            w = random_block_sparse(rng, 64, 32, (16, 1), 0.5)
            assert np.array_equal(to_dense(from_dense(w)), w)

    def test_non_divisible_names_padded_shape(self):
        with pytest.raises(ShapeError) as exc:
            from_dense(np.ones((20, 3)), 16, 1)
        assert "32x3" in exc.value.hint

    def test_ledger_length_and_dtype(self, rng):
        w = random_block_sparse(rng, 64, 40, (16, 1), 0.3)
        m = from_dense(w)
        assert len(m.ledger) == m.n_block_rows + m.n_stored
        assert m.ledger.dtype == np.uint16

    def test_nbytes(self, rng):
        m = from_dense(random_block_sparse(rng, 32, 8, (16, 1), 0.5))
        assert m.nbytes == m.n_stored * 16 * 4 + len(m.ledger) * 2


def test_pad_to_blocks():
    w = np.ones((20, 3))
    padded = pad_to_blocks(w, 16, 2)
    assert padded.shape == (32, 4)
    assert padded[:20, :3].sum() == 60 and padded.sum() == 60
    assert pad_to_blocks(np.ones((16, 2)), 16, 1).shape == (16, 2)


class TestLedgerValidation:
    def make(self, ledger, n_blocks=1):
        return BlockSparseMatrix(32, 4, 16, 1, np.zeros((n_blocks, 16, 1)), np.array(ledger))

    def test_count_data_mismatch(self):
        with pytest.raises(LedgerError):
            self.make([1, 0, 1, 2], n_blocks=1)

    def test_unsorted_indices(self):
        with pytest.raises(LedgerError):
            self.make([2, 1, 0, 0], n_blocks=2)

    def test_index_out_of_range(self):
        with pytest.raises(LedgerError):
            self.make([1, 4, 0])

    def test_truncated(self):
        with pytest.raises(LedgerError):
            self.make([1, 0])

    def test_trailing_entries(self):
        with pytest.raises(LedgerError):
            self.make([1, 0, 0, 7])

    def test_zero_ledger_reads_as_zero_matrix(self):
        assert not to_dense(self.make([0, 0], n_blocks=0)).any()


class TestMatvec:
    def test_zero_and_identity(self, rng):
        x = rng.standard_normal(16).astype(np.float32)
        assert not matvec(from_dense(np.zeros((16, 16))), x).any()
        assert np.array_equal(matvec(from_dense(np.eye(16, dtype=np.float32)), x), x)

    def test_random_against_dense_oracle(self, rng):
        for _ in range(200):
            br, bc = [(16, 1), (4, 4), (8, 2), (1, 1)][rng.integers(4)]
            rows, cols = br * rng.integers(1, 8), bc * rng.integers(1, 24)
            w = random_block_sparse(rng, rows, cols, (br, bc), rng.uniform(0, 1))
            x = rng.standard_normal(cols)
            expected = w.astype(np.float64) @ x
            got = matvec(from_dense(w, br, bc), x)
            scale = max(1.0, float(np.max(np.abs(expected))))
            assert np.max(np.abs(got - expected)) <= 1e-5 * scale

    def test_linear(self, rng):
        m = from_dense(random_block_sparse(rng, 32, 16, (16, 1), 0.5))
        x = rng.standard_normal(16)
        assert np.allclose(matvec(m, 3.0 * x), 3.0 * matvec(m, x), rtol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            matvec(from_dense(np.eye(16)), np.ones(15))

    def test_quantized_matrix_needs_integer_kernel(self):
        with pytest.raises(QuantizationError):
            matvec(from_dense(np.eye(16)).quantized(), np.ones(16))


class TestMatvecQuantized:
    def test_single_block(self):
        data = np.zeros((16, 4), dtype=np.int8)
        data[:, 0] = 1
        m = from_quantized(QuantizedTensor(data, QuantParams(1.0)), 16, 1)
        x = QuantizedTensor(np.array([2, 5, -3, 7], dtype=np.int8), QuantParams(1.0))
        acc = matvec_quantized(m, x)
        assert acc.dtype == np.int32
        assert acc.tolist() == [2] * 16

    def test_zero_blocks(self):
        m = from_quantized(QuantizedTensor(np.zeros((16, 4), np.int8), QuantParams(1.0)), 16, 1)
        assert not matvec_quantized(m, quantize_symmetric(np.ones(4))).any()

    def test_bitwise_against_dense_integer_oracle(self, rng):
        for _ in range(200):
            br, bc = [(16, 1), (4, 4), (2, 8)][rng.integers(3)]
            rows, cols = br * rng.integers(1, 6), bc * rng.integers(1, 20)
            w = random_block_sparse(rng, rows, cols, (br, bc), rng.uniform(0, 1))
            wq = quantize_symmetric(w, 8)
            xq = quantize_symmetric(rng.standard_normal(cols), 8)
            expected = wq.data.astype(np.int64) @ xq.data.astype(np.int64)
            assert np.array_equal(matvec_quantized(from_quantized(wq, br, bc), xq), expected)

    def test_quantized_keeps_ledger(self, rng):
        m = from_dense(random_block_sparse(rng, 32, 8, (16, 1), 0.5))
        q = m.quantized()
        assert np.array_equal(q.ledger, m.ledger)
        assert np.max(np.abs(q.dequantized().data - m.data)) <= q.params.scale / 2 + 1e-7

    def test_accumulator_guarantee(self):
        with pytest.raises(QuantizationError):
            BlockSparseMatrix(
                16, MAX_QUANTIZED_COLS + 16, 16, 1, np.zeros((0, 16, 1), np.int8), np.array([0]), QuantParams(1.0)
            )

    def test_rejects_16_bit_input(self):
        m = from_dense(np.eye(16)).quantized()
        with pytest.raises(QuantizationError):
            matvec_quantized(m, quantize_symmetric(np.ones(16), 16))


@pytest.mark.parametrize(
    "stored_cols, expected",
    [((), 1.0), ((0, 1, 2, 3), 0.0), ((0, 1, 2), 0.25)],
)
def test_sparsity(stored_cols, expected):
    w = np.zeros((16, 4))
    for c in stored_cols:
        w[:, c] = 1.0
    assert sparsity(from_dense(w)) == pytest.approx(expected)
