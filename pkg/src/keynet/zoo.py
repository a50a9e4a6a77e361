"""Built-in network topologies used by the demos and the test batteries."""

from __future__ import annotations

import numpy as np

from .network import AvgPool, Conv2d, Dense, NetworkDef, Relu


def tiny_demo() -> NetworkDef:
    """The canonical worked example: a 1x2 difference kernel plus a rectifier.

    Input is a single-channel 2x2 image; the convolution slides the kernel
    [-1, 1] over each row (valid extent), so the two outputs are the
    horizontal differences, rectified.
    """
    weight = np.array([[[[-1.0, 1.0]]]])
    return NetworkDef((1, 2, 2), [Conv2d(1, 1, 1, 2, weight=weight), Relu()])


def tiny_demo_image() -> np.ndarray:
    return np.array([[[11.0, 12.0], [21.0, 22.0]]])


def _conv(rng, in_ch, out_ch, k, stride=1, pad=0, bias=True) -> Conv2d:
    scale = 1.0 / np.sqrt(in_ch * k * k)
    return Conv2d(
        in_ch,
        out_ch,
        k,
        k,
        stride=stride,
        pad=pad,
        weight=rng.standard_normal((out_ch, in_ch, k, k)) * scale,
        bias=rng.uniform(-0.1, 0.1, out_ch) if bias else None,
    )


def _dense(rng, in_dim, out_dim, bias=True) -> Dense:
    scale = 1.0 / np.sqrt(in_dim)
    return Dense(
        in_dim,
        out_dim,
        weight=rng.standard_normal((out_dim, in_dim)) * scale,
        bias=rng.uniform(-0.1, 0.1, out_dim) if bias else None,
    )


def lenet(seed: int = 0) -> NetworkDef:
    """Five learned layers on 28x28 input: conv/pool/conv/pool then three dense."""
    rng = np.random.default_rng(seed)
    return NetworkDef(
        (1, 28, 28),
        [
            _conv(rng, 1, 6, 5),          # -> 6x24x24
            Relu(),
            AvgPool(2, 2),                # -> 6x12x12
            _conv(rng, 6, 16, 5),         # -> 16x8x8
            Relu(),
            AvgPool(2, 2),                # -> 16x4x4
            _dense(rng, 256, 120),
            Relu(),
            _dense(rng, 120, 84),
            Relu(),
            _dense(rng, 84, 10),
        ],
    )


def allconv(seed: int = 0) -> NetworkDef:
    """All-convolutional topology: strided convs instead of pooling, global
    average pooling instead of a classifier head."""
    rng = np.random.default_rng(seed)
    return NetworkDef(
        (1, 28, 28),
        [
            _conv(rng, 1, 6, 3, stride=2, pad=1),    # -> 6x14x14
            Relu(),
            _conv(rng, 6, 6, 3, pad=1),              # -> 6x14x14
            Relu(),
            _conv(rng, 6, 12, 3, stride=2, pad=1),   # -> 12x7x7
            Relu(),
            _conv(rng, 12, 12, 3, pad=1),            # -> 12x7x7
            Relu(),
            _conv(rng, 12, 10, 1),                   # -> 10x7x7
            Relu(),
            AvgPool(7, 7),                           # -> 10x1x1
        ],
    )
