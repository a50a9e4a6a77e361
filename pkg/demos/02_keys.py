#!/usr/bin/env python3
"""Generalized doubly stochastic keys and their analytic inverses.

Shows the key structure as the privacy parameter alpha grows, checks the
inverse quality, and demonstrates why rectifier boundaries get plain scaled
permutations: those are the keys the rectifier commutes with.
"""

import numpy as np

from keynet.keys import (
    KeyGenConfig,
    gen_key,
    gen_relu_key,
    key_apply,
    key_apply_linear,
    key_unapply,
    key_unapply_linear,
)

rng = np.random.default_rng(1)

# ------------------------------------------------------------
# Softness grows with alpha: up to alpha entries per row/column
# ------------------------------------------------------------
print("alpha | nnz/row (fwd) | nnz/row (inv) | max |F@Finv - I|")
for alpha in (1, 2, 4, 8):
    k = gen_key(KeyGenConfig(dim=64, alpha=alpha, seed=7))
    fwd_rows = np.bincount(k.forward_core.row, minlength=64)
    inv_rows = np.bincount(k.inverse_core.row, minlength=64)
    residual = np.abs(
        k.forward.to_dense() @ k.inverse.to_dense() - np.eye(65)
    ).max()
    print(
        f"  {alpha}   |   {fwd_rows.max()} (mean {fwd_rows.mean():.2f})  |"
        f"   {inv_rows.max()} (mean {inv_rows.mean():.2f})  |  {residual:.2e}"
    )

# ------------------------------------------------------------
# With unit gains and no bias the core is doubly stochastic
# ------------------------------------------------------------
k = gen_key(KeyGenConfig(dim=12, alpha=3, seed=2, gain_range=(1.0, 1.0), with_bias=False))
core = k.forward_core.to_dense()
print("\nrow sums :", np.round(core.sum(axis=1), 12))
print("col sums :", np.round(core.sum(axis=0), 12))

# ------------------------------------------------------------
# Forward and inverse transport homogeneous vectors losslessly
# ------------------------------------------------------------
k = gen_key(KeyGenConfig(dim=6, alpha=2, seed=3))
x = np.concatenate([rng.standard_normal(6), [1.0]])
y = key_apply(k, x)
print("\nx        :", np.round(x, 3))
print("keyed    :", np.round(y, 3))
print("unkeyed  :", np.round(key_unapply(k, y), 3))

# ------------------------------------------------------------
# Rectifier boundaries: scale-then-shuffle commutes with max(0, .)
# ------------------------------------------------------------
k = gen_relu_key(8, seed=4)
x = rng.standard_normal(8)
through_key = key_unapply_linear(k, np.maximum(key_apply_linear(k, x), 0.0))
print("\nrelu(x)             :", np.round(np.maximum(x, 0.0), 6))
print("unscale.relu.scale  :", np.round(through_key, 6))
print("max abs difference  :", np.abs(through_key - np.maximum(x, 0.0)).max())
