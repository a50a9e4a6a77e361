"""Tiled block format: dedup, lossless round-trips, bitwise matvec parity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keynet.errors import FormatError, ParameterError, ShapeError
from keynet.sparse import (
    CooMatrix,
    coo_matvec,
    from_tiled,
    kstm_bytes,
    kstm_from_bytes,
    tiled_matvec,
    to_tiled,
)

from test_sparse import random_coo


class TestToTiled:
    def test_zero_matrix(self):
        t = to_tiled(CooMatrix.empty(8, 8), 4)
        assert t.n_tiles == 0
        assert (t.grid == -1).all()
        assert t.grid.shape == (2, 2)

    def test_identical_blocks_deduplicated(self):
        blk = np.arange(16, dtype=np.float64).reshape(4, 4) + 1
        dense = np.zeros((8, 8))
        dense[:4, :4] = blk
        dense[4:, 4:] = blk
        t = to_tiled(CooMatrix.from_dense(dense), 4)
        assert t.n_tiles == 1
        assert t.grid[0, 0] == t.grid[1, 1] == 0
        assert t.grid[0, 1] == t.grid[1, 0] == -1

    def test_nearly_equal_blocks_not_merged(self):
        dense = np.zeros((4, 2))
        dense[0, 0] = 1.0
        dense[2, 0] = 1.0 + 1e-16  # rounds to 1.0 in f64, so tiles merge
        t_same = to_tiled(CooMatrix.from_dense(dense), 2)
        assert t_same.n_tiles == 1
        dense[2, 0] = np.nextafter(1.0, 2.0)  # genuinely different bits
        t_diff = to_tiled(CooMatrix.from_dense(dense), 2)
        assert t_diff.n_tiles == 2

    def test_conv_toeplitz_tiles_far_fewer_than_cells(self):
        from keynet.network import Conv2d, lower_conv2d

        rng = np.random.default_rng(0)
        spec = Conv2d(1, 1, 3, 3, stride=1, pad=1, weight=rng.standard_normal((1, 1, 3, 3)))
        aff = lower_conv2d(spec, (1, 8, 8))
        t = to_tiled(aff.matrix, 4)
        cells = int((t.grid >= 0).sum())
        assert t.n_tiles < cells / 2
        assert from_tiled(t) == aff.matrix

    def test_tile_size_one(self):
        rng = np.random.default_rng(2)
        m, _ = random_coo(rng, 5, 5, density=0.4)
        t = to_tiled(m, 1)
        assert from_tiled(t) == m

    def test_bad_tile_size(self):
        with pytest.raises(ParameterError):
            to_tiled(CooMatrix.identity(2), 0)


class TestRoundTrip:
    @pytest.mark.parametrize("tile", [1, 2, 4, 8, 16])
    def test_round_trip_bitwise(self, tile):
        rng = np.random.default_rng(tile)
        for rows, cols in [(7, 7), (16, 16), (9, 23), (1, 5)]:
            m, _ = random_coo(rng, rows, cols, density=0.25)
            assert from_tiled(to_tiled(m, tile)) == m

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.integers(1, 20),
        st.integers(1, 20),
        st.sampled_from([1, 2, 3, 4, 8]),
    )
    def test_round_trip_property(self, seed, rows, cols, tile):
        rng = np.random.default_rng(seed)
        m, _ = random_coo(rng, rows, cols, density=0.3)
        assert from_tiled(to_tiled(m, tile)) == m


class TestTiledMatvec:
    def test_identity_tiled(self):
        t = to_tiled(CooMatrix.identity(4), 2)
        v = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(tiled_matvec(t, v), v)

    def test_zero_matrix(self):
        t = to_tiled(CooMatrix.empty(6, 3), 2)
        assert np.array_equal(tiled_matvec(t, np.ones(3)), np.zeros(6))

    def test_matches_coo_bitwise(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            rows = int(rng.integers(1, 30))
            cols = int(rng.integers(1, 30))
            tile = int(rng.choice([1, 2, 3, 4, 8, 16]))
            m, _ = random_coo(rng, rows, cols, density=0.3)
            v = rng.standard_normal(cols)
            assert np.array_equal(tiled_matvec(to_tiled(m, tile), v), coo_matvec(m, v))

    def test_dimension_mismatch(self):
        t = to_tiled(CooMatrix.identity(4), 2)
        with pytest.raises(ShapeError):
            tiled_matvec(t, np.ones(5))


class TestStoredBytes:
    def test_compresses_when_tiles_repeat(self):
        blk = np.full((4, 4), 3.0)
        dense = np.zeros((16, 16))
        for k in range(4):
            dense[4 * k : 4 * k + 4, 4 * k : 4 * k + 4] = blk
        m = CooMatrix.from_dense(dense)
        t = to_tiled(m, 4)
        assert t.n_tiles == 1
        assert t.stored_bytes() <= m.stored_bytes()

    def test_reports_serialized_sizes(self):
        rng = np.random.default_rng(4)
        m, _ = random_coo(rng, 10, 10, density=0.3)
        t = to_tiled(m, 4)
        assert m.stored_bytes() == 32 + 24 * m.nnz
        assert t.stored_bytes() == 56 + 8 * t.n_tiles * 16 + 8 * t.grid.size


class TestKstmFormat:
    def test_round_trip(self):
        rng = np.random.default_rng(8)
        m, _ = random_coo(rng, 11, 17, density=0.2)
        t = to_tiled(m, 4)
        t2 = kstm_from_bytes(kstm_bytes(t))
        assert from_tiled(t2) == m
        assert t2.tile_size == 4
        assert np.array_equal(t2.grid, t.grid)

    def test_blob_size_matches_stored_bytes(self):
        rng = np.random.default_rng(10)
        m, _ = random_coo(rng, 20, 20, density=0.15)
        t = to_tiled(m, 8)
        assert len(kstm_bytes(t)) == t.stored_bytes()

    def test_bad_magic(self):
        t = to_tiled(CooMatrix.identity(4), 2)
        blob = b"NOPE" + kstm_bytes(t)[4:]
        with pytest.raises(FormatError):
            kstm_from_bytes(blob)

    def test_dangling_tile_id(self):
        t = to_tiled(CooMatrix.identity(4), 2)
        blob = bytearray(kstm_bytes(t))
        # Point a grid cell at a tile id beyond the dictionary.
        blob[-8:] = (99).to_bytes(8, "little", signed=True)
        with pytest.raises(FormatError):
            kstm_from_bytes(bytes(blob))
