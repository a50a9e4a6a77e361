#!/usr/bin/env python3
"""Coordinate matrices and the deduplicating tile format.

Builds the sparse matrix of a small convolution, shows how few distinct
tiles it actually contains, and round-trips both serialization formats.
"""

import numpy as np

from keynet.network import Conv2d, lower_conv2d
from keynet.sparse import (
    CooMatrix,
    coo_matvec,
    from_tiled,
    kspm_bytes,
    kstm_bytes,
    tiled_matvec,
    to_tiled,
)

rng = np.random.default_rng(0)

# ------------------------------------------------------------
# A coordinate matrix is rows/cols/values, nothing else
# ------------------------------------------------------------
m = CooMatrix.from_dense([[2.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
print("matrix:")
print(m.to_dense())
print("nnz:", m.nnz)
print("matvec [1,2,3] ->", coo_matvec(m, np.array([1.0, 2.0, 3.0])))

# ------------------------------------------------------------
# Convolution matrices replicate the kernel row after row
# ------------------------------------------------------------
conv = Conv2d(1, 4, 3, 3, pad=1, weight=rng.standard_normal((4, 1, 3, 3)))
aff = lower_conv2d(conv, (1, 16, 16))
w = aff.matrix
print(f"\n3x3 conv on 16x16 lowered to {w.rows}x{w.cols}, nnz={w.nnz}")

# ------------------------------------------------------------
# Tiling: identical 16x16 blocks are stored once
# ------------------------------------------------------------
for tile in (8, 16, 32):
    t = to_tiled(w, tile)
    cells = int((t.grid >= 0).sum())
    print(
        f"  T={tile:3d}: {cells} occupied cells share {t.n_tiles} distinct tiles; "
        f"{w.stored_bytes()} coo bytes -> {t.stored_bytes()} tiled bytes "
        f"({t.stored_bytes() / w.stored_bytes():.2f}x)"
    )

# ------------------------------------------------------------
# The tiled execution path is bit-identical to the coordinate path
# ------------------------------------------------------------
t = to_tiled(w, 16)
v = rng.standard_normal(w.cols)
assert np.array_equal(tiled_matvec(t, v), coo_matvec(w, v))
assert from_tiled(t) == w
print("\ntiled matvec == coo matvec bitwise, round-trip lossless")

# ------------------------------------------------------------
# Both formats serialize to self-describing binary blobs
# ------------------------------------------------------------
print(f"KSPM blob: {len(kspm_bytes(w))} bytes, KSTM blob: {len(kstm_bytes(t))} bytes")
