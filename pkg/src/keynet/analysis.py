"""Privacy-analysis toolkit: key recovery, nonnegative split, SSIM.

The chosen-plaintext attack demonstrates the classical weakness of linear
ciphers: anyone who can feed chosen images through the sensor recovers the
affine key by probing, either column by column with basis vectors or by
least squares over random probes.  The nonnegative split materializes the
elementwise decomposition B = B_p - B_n that connects key recovery from the
public products to nonnegative matrix factorization (no factorization solver
lives here; the split is an identity, not an attack).  SSIM is the
perceptibility surrogate used to judge how private an encoded image looks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, SingularSystemError
from .sparse import CooMatrix


@dataclass
class AttackResult:
    """Recovered affine map [A b] plus its held-out residual."""

    recovered: np.ndarray
    probe_count: int
    residual: float
    success: bool


def chosen_plaintext_attack(
    oracle,
    dim: int,
    n_probes: int | None = None,
    probes: str = "basis",
    seed: int = 0,
    tol: float = 1e-9,
    holdout: int = 16,
) -> AttackResult:
    """Recover the affine map behind ``oracle: x -> A x + b``.

    Basis probing queries the zero vector for the bias and each standard
    basis vector for one column; random probing solves the least squares
    system over ``n_probes`` random inputs and needs at least dim + 1 of
    them to determine the dim x (dim+1) unknowns.  The residual is the
    maximum relative error over fresh random probes.
    """
    rng = np.random.default_rng(seed)
    if probes == "basis":
        bias = np.asarray(oracle(np.zeros(dim)), dtype=np.float64)
        cols = np.empty((dim, dim))
        eye_row = np.zeros(dim)
        for i in range(dim):
            eye_row[:] = 0.0
            eye_row[i] = 1.0
            cols[:, i] = np.asarray(oracle(eye_row), dtype=np.float64) - bias
        recovered = np.hstack([cols, bias[:, None]])
        probe_count = dim + 1
    elif probes == "random":
        if n_probes is None:
            n_probes = dim + 1
        x = rng.standard_normal((n_probes, dim))
        design = np.hstack([x, np.ones((n_probes, 1))])
        y = np.stack([np.asarray(oracle(row), dtype=np.float64) for row in x])
        solution, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < dim + 1:
            raise SingularSystemError(
                f"{n_probes} probes span rank {rank} < {dim + 1}; system is underdetermined"
            )
        recovered = solution.T
        probe_count = n_probes
    else:
        raise ParameterError(f"probes must be 'basis' or 'random', got {probes!r}")

    worst = 0.0
    for _ in range(holdout):
        x = rng.standard_normal(dim)
        truth = np.asarray(oracle(x), dtype=np.float64)
        guess = recovered[:, :dim] @ x + recovered[:, dim]
        denom = np.linalg.norm(truth)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(guess - truth) / denom))
    return AttackResult(
        recovered=recovered, probe_count=probe_count, residual=worst, success=worst <= tol
    )


def key_oracle(key) -> callable:
    """Wrap a key as the plaintext oracle an attacker with sensor access has."""
    from .keys import key_apply

    def oracle(x: np.ndarray) -> np.ndarray:
        v = np.concatenate([np.asarray(x, dtype=np.float64), [1.0]])
        return key_apply(key, v)[:-1]

    return oracle


def nonneg_split(b: CooMatrix) -> tuple[CooMatrix, CooMatrix]:
    """Elementwise split B = B_p - B_n with both parts >= 0 and disjoint."""
    pos = b.val > 0
    neg = ~pos
    b_p = CooMatrix._canonical(b.rows, b.cols, b.row[pos], b.col[pos], b.val[pos])
    b_n = CooMatrix._canonical(b.rows, b.cols, b.row[neg], b.col[neg], -b.val[neg])
    return b_p, b_n


@dataclass(frozen=True)
class SsimParams:
    """Window size and stabilization constants of the similarity index."""

    window: int = 8
    dynamic_range: float = 1.0
    c1: float | None = None
    c2: float | None = None

    def __post_init__(self):
        if self.window < 2:
            raise ParameterError(f"window must be >= 2, got {self.window}")
        if self.dynamic_range <= 0:
            raise ParameterError(f"dynamic range must be > 0, got {self.dynamic_range}")
        if self.c1 is None:
            object.__setattr__(self, "c1", (0.01 * self.dynamic_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (0.03 * self.dynamic_range) ** 2)
        if self.c1 <= 0 or self.c2 <= 0:
            raise ParameterError("stabilization constants must be > 0")


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Mean structural similarity over all full windows, clamped to [0, 1].

    Uniform windows; per window the standard luminance/contrast/structure
    product. 1.0 means the images are identical, values near 0 mean no
    recognizable common structure (privacy preserving).
    """
    if params is None:
        params = SsimParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError("similarity is defined on single-channel 2-D images")
    win = params.window
    if win > min(a.shape):
        raise ParameterError(f"window {win} exceeds image extent {a.shape}")

    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa * wa).mean(axis=(2, 3)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(2, 3)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b

    c1, c2 = params.c1, params.c2
    score_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.clip(score_map.mean(), 0.0, 1.0))
