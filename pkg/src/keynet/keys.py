"""Generation of generalized doubly stochastic keys with sparse inverses.

A key is a nonnegative matrix ``D @ P @ S`` in affine-augmented form, where
``D`` is a positive diagonal gain, ``P`` a global permutation, and ``S`` a
block-diagonal soft shuffle: each block of size alpha mixes the identity with
an average of alpha random permutations under a dominance weight theta in
(0.5, 1).  Block diagonal dominance makes every block invertible, and the
block structure keeps the analytically computed inverse as sparse as the
forward matrix: at most alpha nonzeros per row and per column of the
non-augmented part on both sides.

An optional bias vector rides in the augmented column.  Keys for boundaries
feeding a rectifier are restricted to bias-free scaled permutations
(alpha == 1), the structure the rectifier commutes with.

Every key is a pure function of its configuration: the draw order
(gains, bias, global permutation, then per-block mixing) is fixed and the
generator is a seeded PCG64 stream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ParameterError, ShapeError
from .sparse import CooMatrix, coo_matvec, kspm_bytes, read_kspm, write_kspm

DEFAULT_GAIN_RANGE = (0.5, 2.0)
DEFAULT_BIAS_RANGE = (0.0, 1.0)
DEFAULT_DOMINANCE_RANGE = (0.55, 0.95)


def derive_seed(root: int, *path: int) -> int:
    """Stable 63-bit sub-seed for (root, path), independent of RNG state."""
    tag = ":".join(str(int(p)) for p in (root, *path))
    digest = hashlib.sha256(b"keynet-seed:" + tag.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class KeyGenConfig:
    """Full parameter set for one key.  Validated on construction."""

    dim: int
    alpha: int = 1
    seed: int = 0
    gain_range: tuple[float, float] = DEFAULT_GAIN_RANGE
    bias_range: tuple[float, float] = DEFAULT_BIAS_RANGE
    dominance_range: tuple[float, float] = DEFAULT_DOMINANCE_RANGE
    with_bias: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")
        if self.alpha < 1:
            raise ParameterError(f"alpha must be >= 1, got {self.alpha}")
        if self.alpha > self.dim:
            raise ParameterError(f"alpha {self.alpha} exceeds dim {self.dim}")
        lo, hi = self.gain_range
        if lo <= 0 or hi < lo:
            raise ParameterError(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}")
        blo, bhi = self.bias_range
        if bhi < blo:
            raise ParameterError(f"bias_range must satisfy lo <= hi, got {self.bias_range}")
        tlo, thi = self.dominance_range
        if not (0.5 < tlo <= thi < 1.0):
            raise ParameterError(
                f"dominance_range must lie strictly inside (0.5, 1), got {self.dominance_range}"
            )


@dataclass
class KeyMatrix:
    """A key and its analytically paired inverse, both affine-augmented.

    ``forward`` and ``inverse`` are (dim+1) x (dim+1) sparse matrices acting
    on homogeneous vectors [x; 1].  The forward matrix is nonnegative with
    last row [0, ..., 0, 1]; forward @ inverse is the identity to well below
    1e-9.
    """

    dim: int
    alpha: int
    seed: int
    has_bias: bool
    forward: CooMatrix
    inverse: CooMatrix

    @cached_property
    def forward_core(self) -> CooMatrix:
        """Non-augmented block of the forward matrix (bias column dropped)."""
        return _affine_core(self.forward)

    @cached_property
    def inverse_core(self) -> CooMatrix:
        return _affine_core(self.inverse)

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 of the serialized forward matrix; identifies the key safely."""
        return hashlib.sha256(kspm_bytes(self.forward)).hexdigest()

    def __repr__(self) -> str:
        return f"KeyMatrix(dim={self.dim}, alpha={self.alpha}, has_bias={self.has_bias})"


def _affine_core(m: CooMatrix) -> CooMatrix:
    keep = (m.row < m.rows - 1) & (m.col < m.cols - 1)
    return CooMatrix._canonical(
        m.rows - 1, m.cols - 1, m.row[keep], m.col[keep], m.val[keep]
    )


def _block_sizes(dim: int, alpha: int) -> list[int]:
    sizes = [alpha] * (dim // alpha)
    if dim % alpha:
        sizes.append(dim % alpha)
    return sizes


def _assemble(dim, alpha, seed, gains, bias, perm, blocks) -> KeyMatrix:
    """Assemble forward = Aug(D P S) and its analytic inverse."""
    inv_perm = np.argsort(perm)

    f_rows, f_cols, f_vals = [], [], []
    i_rows, i_cols, i_vals = [], [], []
    if blocks is None:
        # S is the identity: a plain scaled permutation.
        idx = np.arange(dim)
        f_rows.append(idx)
        f_cols.append(perm)
        f_vals.append(gains)
        i_rows.append(idx)
        i_cols.append(inv_perm)
        i_vals.append(1.0 / gains[inv_perm])
    else:
        offset = 0
        for blk in blocks:
            s = blk.shape[0]
            blk_inv = np.linalg.inv(blk)
            r, c = np.nonzero(blk)
            f_rows.append(inv_perm[offset + r])
            f_cols.append(offset + c)
            f_vals.append(gains[inv_perm[offset + r]] * blk[r, c])
            r, c = np.nonzero(blk_inv)
            cols = inv_perm[offset + c]
            i_rows.append(offset + r)
            i_cols.append(cols)
            i_vals.append(blk_inv[r, c] / gains[cols])
            offset += s

    f_rows = np.concatenate(f_rows)
    f_cols = np.concatenate(f_cols)
    f_vals = np.concatenate(f_vals)
    i_rows = np.concatenate(i_rows)
    i_cols = np.concatenate(i_cols)
    i_vals = np.concatenate(i_vals)

    aug = dim + 1
    has_bias = bias is not None
    fb_rows = [f_rows, np.array([dim])]
    fb_cols = [f_cols, np.array([dim])]
    fb_vals = [f_vals, np.array([1.0])]
    ib_rows = [i_rows, np.array([dim])]
    ib_cols = [i_cols, np.array([dim])]
    ib_vals = [i_vals, np.array([1.0])]
    if has_bias:
        nz = np.flatnonzero(bias)
        fb_rows.insert(1, nz)
        fb_cols.insert(1, np.full(nz.size, dim))
        fb_vals.insert(1, bias[nz])
        # Back-substitute the bias through the inverse: q = -(S P D)^-1 b.
        core_inv = CooMatrix(dim, dim, i_rows, i_cols, i_vals)
        q = -coo_matvec(core_inv, bias)
        nz = np.flatnonzero(q)
        ib_rows.insert(1, nz)
        ib_cols.insert(1, np.full(nz.size, dim))
        ib_vals.insert(1, q[nz])

    forward = CooMatrix(aug, aug, np.concatenate(fb_rows), np.concatenate(fb_cols), np.concatenate(fb_vals))
    inverse = CooMatrix(aug, aug, np.concatenate(ib_rows), np.concatenate(ib_cols), np.concatenate(ib_vals))
    return KeyMatrix(dim=dim, alpha=alpha, seed=seed, has_bias=has_bias, forward=forward, inverse=inverse)


def gen_key(cfg: KeyGenConfig) -> KeyMatrix:
    """Generate the key determined by ``cfg``.

    Fixed draw order: gains, bias (if enabled), global permutation, then per
    block a dominance weight theta followed by alpha random permutations.
    """
    rng = np.random.default_rng(cfg.seed)
    dim, alpha = cfg.dim, cfg.alpha
    gains = rng.uniform(*cfg.gain_range, dim)
    bias = rng.uniform(*cfg.bias_range, dim) if cfg.with_bias else None
    perm = rng.permutation(dim)

    blocks = None
    if alpha > 1:
        blocks = []
        for s in _block_sizes(dim, alpha):
            theta = rng.uniform(*cfg.dominance_range)
            mix = np.zeros((s, s))
            rows = np.arange(s)
            for _ in range(alpha):
                mix[rows, rng.permutation(s)] += (1.0 - theta) / alpha
            mix[rows, rows] += theta
            blocks.append(mix)

    return _assemble(dim, alpha, cfg.seed, gains, bias, perm, blocks)


def gen_relu_key(
    dim: int,
    seed: int,
    gain_range: tuple[float, float] = DEFAULT_GAIN_RANGE,
    pow2_gains: bool = False,
) -> KeyMatrix:
    """Bias-free scaled-permutation key for a rectifier boundary.

    With ``pow2_gains`` every gain is snapped to the nearest power of two,
    making scale-then-unscale through the rectifier bit-exact.
    """
    lo, hi = gain_range
    if lo <= 0 or hi < lo:
        raise ParameterError(f"gain_range must satisfy 0 < lo <= hi, got {gain_range}")
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    gains = rng.uniform(lo, hi, dim)
    if pow2_gains:
        gains = np.exp2(np.rint(np.log2(gains)))
    perm = rng.permutation(dim)
    return _assemble(dim, 1, seed, gains, None, perm, None)


def identity_key(dim: int) -> KeyMatrix:
    """Debug key: the identity transform (used for public boundaries too)."""
    eye = CooMatrix.identity(dim + 1)
    return KeyMatrix(dim=dim, alpha=1, seed=0, has_bias=False, forward=eye, inverse=eye)


def _check_homogeneous(k: KeyMatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != k.dim + 1:
        raise ShapeError(f"expected homogeneous vector of length {k.dim + 1}, got {v.shape}")
    if v[-1] != 1.0:
        raise ContractError("homogeneous coordinate must be exactly 1")
    return v


def key_apply(k: KeyMatrix, v: np.ndarray) -> np.ndarray:
    """Apply the forward transform to a homogeneous vector [x; 1]."""
    return coo_matvec(k.forward, _check_homogeneous(k, v))


def key_unapply(k: KeyMatrix, v: np.ndarray) -> np.ndarray:
    """Invert :func:`key_apply`."""
    return coo_matvec(k.inverse, _check_homogeneous(k, v))


def key_apply_linear(k: KeyMatrix, x: np.ndarray) -> np.ndarray:
    """Apply only the non-augmented block (no bias) to a plain vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (k.dim,):
        raise ShapeError(f"expected vector of length {k.dim}, got {x.shape}")
    return coo_matvec(k.forward_core, x)


def key_unapply_linear(k: KeyMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (k.dim,):
        raise ShapeError(f"expected vector of length {k.dim}, got {x.shape}")
    return coo_matvec(k.inverse_core, x)


# ---------------------------------------------------------------------------
# Key files: a JSON manifest next to two KSPM blobs (forward and inverse).
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_key(key: KeyMatrix, directory, prefix: str = "key") -> Path:
    """Write ``{prefix}.json`` plus forward/inverse blobs; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fwd = directory / f"{prefix}.fwd.kspm"
    inv = directory / f"{prefix}.inv.kspm"
    write_kspm(key.forward, fwd)
    write_kspm(key.inverse, inv)
    manifest = {
        "format": "keynet-key",
        "version": 1,
        "dim": key.dim,
        "alpha": key.alpha,
        "seed": key.seed,
        "has_bias": key.has_bias,
        "fingerprint": key.fingerprint,
        "forward": {"file": fwd.name, "sha256": _sha256_file(fwd)},
        "inverse": {"file": inv.name, "sha256": _sha256_file(inv)},
    }
    path = directory / f"{prefix}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_key(directory, prefix: str = "key") -> KeyMatrix:
    directory = Path(directory)
    manifest_path = directory / f"{prefix}.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable key manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != "keynet-key":
        raise FormatError(f"{manifest_path} is not a key manifest")
    mats = {}
    for role in ("forward", "inverse"):
        entry = manifest[role]
        blob_path = directory / entry["file"]
        if _sha256_file(blob_path) != entry["sha256"]:
            raise FormatError(f"checksum mismatch for {blob_path}")
        mats[role] = read_kspm(blob_path)
    dim = int(manifest["dim"])
    for m in mats.values():
        if m.shape != (dim + 1, dim + 1):
            raise FormatError(f"key blob shape {m.shape} does not match dim {dim}")
    return KeyMatrix(
        dim=dim,
        alpha=int(manifest["alpha"]),
        seed=int(manifest["seed"]),
        has_bias=bool(manifest["has_bias"]),
        forward=mats["forward"],
        inverse=mats["inverse"],
    )
