"""Sparse matrix kernels and the tiled block format used throughout the engine.

Two carriers live here:

* :class:`CooMatrix` -- coordinate-format sparse matrix with 64-bit real
  entries, kept canonical (row-major sorted, unique coordinates, no stored
  zeros).  All layer matrices and keys are CooMatrix instances.
* :class:`TiledMatrix` -- a block decomposition of a CooMatrix that
  deduplicates bit-identical tiles.  Convolution matrices replicate the same
  kernel rows over and over, so storing each distinct tile once compresses
  them far below raw coordinate storage.

Matrix-vector products accumulate per output row strictly in ascending
column order.  Both the coordinate and the tiled execution paths share that
discipline, which is what makes ``tiled_matvec`` reproduce ``coo_matvec``
bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, ParameterError, ShapeError

KSPM_MAGIC = b"KSPM"
KSTM_MAGIC = b"KSTM"
FORMAT_VERSION = 1

KSPM_HEADER = struct.Struct("<4sIQQQ")
KSTM_HEADER = struct.Struct("<4sIQQQQQQ")

_TRIPLET_DTYPE = np.dtype([("row", "<u8"), ("col", "<u8"), ("val", "<f8")])


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class CooMatrix:
    """Immutable sparse matrix in canonical coordinate form.

    Entries are sorted row-major (row, then column), coordinates are unique,
    and values equal to zero are never stored, so ``nnz`` is always the count
    of true structural nonzeros.
    """

    __slots__ = ("rows", "cols", "row", "col", "val", "_csr")

    def __init__(self, rows: int, cols: int, row, col, val):
        if rows < 0 or cols < 0:
            raise ShapeError(f"negative matrix dims {rows}x{cols}")
        row = np.asarray(row, dtype=np.int64).ravel()
        col = np.asarray(col, dtype=np.int64).ravel()
        val = np.asarray(val, dtype=np.float64).ravel()
        if not (row.size == col.size == val.size):
            raise ShapeError("row/col/val arrays differ in length")
        if row.size:
            if row.min() < 0 or row.max() >= rows or col.min() < 0 or col.max() >= cols:
                raise ShapeError(f"entry index out of bounds for {rows}x{cols}")
        keep = val != 0.0
        if not keep.all():
            row, col, val = row[keep], col[keep], val[keep]
        order = np.lexsort((col, row))
        row, col, val = row[order], col[order], val[order].copy()
        if row.size > 1:
            dup = (np.diff(row) == 0) & (np.diff(col) == 0)
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise ShapeError(f"duplicate coordinate ({row[k]}, {col[k]})")
        self.rows = int(rows)
        self.cols = int(cols)
        self.row = _readonly(row)
        self.col = _readonly(col)
        self.val = _readonly(val)
        self._csr = None

    @classmethod
    def _canonical(cls, rows, cols, row, col, val) -> "CooMatrix":
        """Wrap arrays already in canonical form (sorted, unique, nonzero)."""
        m = cls.__new__(cls)
        m.rows = int(rows)
        m.cols = int(cols)
        m.row = _readonly(np.ascontiguousarray(row, dtype=np.int64))
        m.col = _readonly(np.ascontiguousarray(col, dtype=np.int64))
        m.val = _readonly(np.ascontiguousarray(val, dtype=np.float64))
        m._csr = None
        return m

    @classmethod
    def from_entries(cls, rows: int, cols: int, entries) -> "CooMatrix":
        """Build from an iterable of ``(row, col, value)`` triples."""
        entries = list(entries)
        if not entries:
            return cls(rows, cols, [], [], [])
        r, c, v = zip(*entries)
        return cls(rows, cols, r, c, v)

    @classmethod
    def from_dense(cls, arr) -> "CooMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("dense input must be 2-D")
        r, c = np.nonzero(arr)
        return cls._canonical(arr.shape[0], arr.shape[1], r, c, arr[r, c])

    @classmethod
    def identity(cls, n: int) -> "CooMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls._canonical(n, n, idx, idx, np.ones(n))

    @classmethod
    def empty(cls, rows: int, cols: int) -> "CooMatrix":
        z = np.empty(0, dtype=np.int64)
        return cls._canonical(rows, cols, z, z, np.empty(0))

    @property
    def nnz(self) -> int:
        return int(self.val.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row, self.col] = self.val
        return out

    def stored_bytes(self) -> int:
        """Size of this matrix serialized as a KSPM blob."""
        return KSPM_HEADER.size + _TRIPLET_DTYPE.itemsize * self.nnz

    def _as_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            counts = np.bincount(self.row, minlength=self.rows)
            indptr = np.zeros(self.rows + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            m = sp.csr_matrix(
                (self.val, self.col.astype(np.int32), indptr),
                shape=(self.rows, self.cols),
                copy=False,
            )
            m.has_sorted_indices = True
            self._csr = m
        return self._csr

    def __eq__(self, other) -> bool:
        if not isinstance(other, CooMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row, other.row)
            and np.array_equal(self.col, other.col)
            and np.array_equal(self.val, other.val)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"CooMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


class TiledMatrix:
    """Block decomposition of a sparse matrix with bit-exact tile dedup.

    The matrix is logically zero-padded to a multiple of ``tile_size``.  Each
    nonzero block is stored once in ``tiles``; ``grid[i, j]`` holds the tile
    id of block (i, j) or -1 for an all-zero block.  Two grid cells share a
    tile id iff their blocks are bitwise identical, so the decomposition is
    lossless by construction.
    """

    __slots__ = ("rows", "cols", "tile_size", "tiles", "grid")

    def __init__(self, rows: int, cols: int, tile_size: int, tiles, grid):
        if tile_size < 1:
            raise ParameterError(f"tile_size must be >= 1, got {tile_size}")
        self.rows = int(rows)
        self.cols = int(cols)
        self.tile_size = int(tile_size)
        self.tiles = [_readonly(np.asarray(t, dtype=np.float64)) for t in tiles]
        self.grid = _readonly(np.asarray(grid, dtype=np.int64))
        t = self.tile_size
        gr = -(-self.rows // t) if self.rows else 0
        gc = -(-self.cols // t) if self.cols else 0
        if self.grid.shape != (gr, gc):
            raise ShapeError(f"grid shape {self.grid.shape} != {(gr, gc)}")
        for blk in self.tiles:
            if blk.shape != (t, t):
                raise ShapeError(f"tile shape {blk.shape} != {(t, t)}")
        if self.grid.size and self.grid.max(initial=-1) >= len(self.tiles):
            raise FormatError("grid references a missing tile id")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def stored_bytes(self) -> int:
        """Size of this matrix serialized as a KSTM blob."""
        t = self.tile_size
        return KSTM_HEADER.size + 8 * len(self.tiles) * t * t + 8 * self.grid.size

    def __repr__(self) -> str:
        return (
            f"TiledMatrix({self.rows}x{self.cols}, T={self.tile_size}, "
            f"tiles={self.n_tiles}, cells={int((self.grid >= 0).sum())})"
        )


def coo_matvec(m: CooMatrix, v: np.ndarray) -> np.ndarray:
    """Exact sparse-dense product ``m @ v``.

    Per output row the products are accumulated one at a time in ascending
    column order, so the result is a pure function of the stored entries.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.cols:
        raise ShapeError(f"matvec dims: {m.rows}x{m.cols} with vector of {v.shape}")
    return m._as_csr().dot(v)


def coo_matmul(a: CooMatrix, b: CooMatrix) -> CooMatrix:
    """Exact sparse-sparse product.  Entries that cancel to zero are dropped."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul dims: {a.rows}x{a.cols} with {b.rows}x{b.cols}")
    prod = a._as_csr() @ b._as_csr()
    prod.eliminate_zeros()
    prod.sort_indices()
    coo = prod.tocoo()
    return CooMatrix._canonical(
        a.rows, b.cols, coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data
    )


def to_tiled(m: CooMatrix, tile_size: int) -> TiledMatrix:
    """Decompose into deduplicated tiles.  Lossless for any tile size >= 1."""
    if tile_size < 1:
        raise ParameterError(f"tile_size must be >= 1, got {tile_size}")
    t = tile_size
    gr = -(-m.rows // t) if m.rows else 0
    gc = -(-m.cols // t) if m.cols else 0
    grid = np.full((gr, gc), -1, dtype=np.int64)
    tiles: list[np.ndarray] = []
    seen: dict[bytes, int] = {}
    if m.nnz:
        tr = m.row // t
        tc = m.col // t
        cell = tr * gc + tc
        order = np.argsort(cell, kind="stable")
        cell_sorted = cell[order]
        starts = np.flatnonzero(np.diff(cell_sorted, prepend=cell_sorted[0] - 1))
        bounds = np.append(starts, cell_sorted.size)
        for s, e in zip(bounds[:-1], bounds[1:]):
            idx = order[s:e]
            ci = int(cell_sorted[s])
            i, j = divmod(ci, gc)
            blk = np.zeros((t, t))
            blk[m.row[idx] - i * t, m.col[idx] - j * t] = m.val[idx]
            key = blk.tobytes()
            tid = seen.get(key)
            if tid is None:
                tid = len(tiles)
                seen[key] = tid
                tiles.append(blk)
            grid[i, j] = tid
    return TiledMatrix(m.rows, m.cols, t, tiles, grid)


def _block_row_strip(m: TiledMatrix, i: int) -> np.ndarray | None:
    """Densify block-row ``i`` (height clipped to the matrix), or None if empty."""
    t = m.tile_size
    present = np.flatnonzero(m.grid[i] >= 0)
    if present.size == 0:
        return None
    h = min(t, m.rows - i * t)
    strip = np.zeros((h, m.grid.shape[1] * t))
    for j in present:
        strip[:, j * t : (j + 1) * t] = m.tiles[m.grid[i, j]][:h]
    return strip


def from_tiled(m: TiledMatrix) -> CooMatrix:
    """Reassemble the coordinate form.  Round-trips through to_tiled exactly."""
    rows, cols, vals = [], [], []
    t = m.tile_size
    for i in range(m.grid.shape[0]):
        strip = _block_row_strip(m, i)
        if strip is None:
            continue
        r, c = strip.nonzero()
        rows.append(r + i * t)
        cols.append(c)
        vals.append(strip[r, c])
    if not rows:
        return CooMatrix.empty(m.rows, m.cols)
    return CooMatrix._canonical(
        m.rows, m.cols, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )


def tiled_matvec(m: TiledMatrix, v: np.ndarray) -> np.ndarray:
    """Matvec on the tiled form; bitwise identical to the coordinate path.

    Each block-row is densified, its structural zeros are stripped, and the
    surviving products are accumulated per row in ascending column order,
    exactly the sequence coo_matvec performs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.cols:
        raise ShapeError(f"matvec dims: {m.rows}x{m.cols} with vector of {v.shape}")
    y = np.zeros(m.rows)
    t = m.tile_size
    for i in range(m.grid.shape[0]):
        strip = _block_row_strip(m, i)
        if strip is None:
            continue
        r, c = strip.nonzero()
        if r.size == 0:
            continue
        prods = strip[r, c] * v[c]
        h = strip.shape[0]
        y[i * t : i * t + h] = np.bincount(r, weights=prods, minlength=h)
    return y


# ---------------------------------------------------------------------------
# Serialization.
#
# KSPM (sparse coordinate blob): header {magic "KSPM", version u32, rows u64,
# cols u64, nnz u64} followed by nnz triplets (u64 row, u64 col, f64 value),
# all little-endian.
#
# KSTM (tiled blob): header {magic "KSTM", version u32, rows u64, cols u64,
# tile_size u64, n_tiles u64, grid_rows u64, grid_cols u64}, then the tile
# dictionary (n_tiles dense tile_size^2 f64 blocks, row-major, in tile-id
# order), then the grid (grid_rows*grid_cols i64 tile ids, -1 for absent).
# ---------------------------------------------------------------------------


def kspm_bytes(m: CooMatrix) -> bytes:
    header = KSPM_HEADER.pack(KSPM_MAGIC, FORMAT_VERSION, m.rows, m.cols, m.nnz)
    rec = np.empty(m.nnz, dtype=_TRIPLET_DTYPE)
    rec["row"] = m.row
    rec["col"] = m.col
    rec["val"] = m.val
    return header + rec.tobytes()


def kspm_from_bytes(blob: bytes) -> CooMatrix:
    if len(blob) < KSPM_HEADER.size:
        raise FormatError("KSPM blob truncated")
    magic, version, rows, cols, nnz = KSPM_HEADER.unpack_from(blob)
    if magic != KSPM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected KSPM")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported KSPM version {version}")
    want = KSPM_HEADER.size + nnz * _TRIPLET_DTYPE.itemsize
    if len(blob) != want:
        raise FormatError(f"KSPM blob is {len(blob)} bytes, expected {want}")
    rec = np.frombuffer(blob, dtype=_TRIPLET_DTYPE, offset=KSPM_HEADER.size)
    row = rec["row"].astype(np.int64)
    col = rec["col"].astype(np.int64)
    val = rec["val"].astype(np.float64)
    if row.size:
        dr = np.diff(row)
        canonical = bool(
            np.all((dr > 0) | ((dr == 0) & (np.diff(col) > 0))) and np.all(val != 0.0)
        )
    else:
        canonical = True
    if canonical:
        if row.size and (row.max() >= rows or col.max() >= cols):
            raise FormatError("KSPM entry index out of bounds")
        return CooMatrix._canonical(rows, cols, row, col, val)
    try:
        return CooMatrix(rows, cols, row, col, val)
    except ShapeError as exc:
        raise FormatError(f"malformed KSPM entries: {exc}") from exc


def write_kspm(m: CooMatrix, path) -> None:
    Path(path).write_bytes(kspm_bytes(m))


def read_kspm(path) -> CooMatrix:
    return kspm_from_bytes(Path(path).read_bytes())


def kstm_bytes(m: TiledMatrix) -> bytes:
    t = m.tile_size
    header = KSTM_HEADER.pack(
        KSTM_MAGIC,
        FORMAT_VERSION,
        m.rows,
        m.cols,
        t,
        len(m.tiles),
        m.grid.shape[0],
        m.grid.shape[1],
    )
    if m.tiles:
        tile_blob = np.stack(m.tiles).astype("<f8").tobytes()
    else:
        tile_blob = b""
    return header + tile_blob + m.grid.astype("<i8").tobytes()


def kstm_from_bytes(blob: bytes) -> TiledMatrix:
    if len(blob) < KSTM_HEADER.size:
        raise FormatError("KSTM blob truncated")
    magic, version, rows, cols, t, n_tiles, gr, gc = KSTM_HEADER.unpack_from(blob)
    if magic != KSTM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected KSTM")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported KSTM version {version}")
    want = KSTM_HEADER.size + 8 * n_tiles * t * t + 8 * gr * gc
    if len(blob) != want:
        raise FormatError(f"KSTM blob is {len(blob)} bytes, expected {want}")
    off = KSTM_HEADER.size
    tiles_flat = np.frombuffer(blob, dtype="<f8", count=n_tiles * t * t, offset=off)
    tiles = [tiles_flat[k * t * t : (k + 1) * t * t].reshape(t, t) for k in range(n_tiles)]
    off += 8 * n_tiles * t * t
    grid = np.frombuffer(blob, dtype="<i8", count=gr * gc, offset=off).reshape(gr, gc)
    if grid.size and grid.min(initial=0) < -1:
        raise FormatError("KSTM grid holds an invalid tile id")
    try:
        return TiledMatrix(rows, cols, t, tiles, grid)
    except (ShapeError, FormatError) as exc:
        raise FormatError(f"malformed KSTM blob: {exc}") from exc


def write_kstm(m: TiledMatrix, path) -> None:
    Path(path).write_bytes(kstm_bytes(m))


def read_kstm(path) -> TiledMatrix:
    return kstm_from_bytes(Path(path).read_bytes())
