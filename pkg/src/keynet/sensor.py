"""Physical-realization simulation: fiber bundle faceplate and CMOS noise.

The fiber bundle is modeled as a grid of rectangular cores in a brick-like
layout (odd core rows shifted by half a core width, plus an optional
manufacturing shear).  Light falling inside a core's open area is intensity
averaged; interstitial pixels are blocked.  An optional routing map permutes
core outputs, which is how a scaled-permutation image key is realized
optically.  Crosstalk mixes each core with its four nearest vertical and two
nearest horizontal neighbors, and the mixed field is rescaled to the input
image maximum.

The CMOS stage converts photons to digital counts: photoelectrons and dark
electrons are Poisson draws (Gaussian above a mean of 1000), a per-pixel gain
and bias map electrons to counts, ADC noise is added, and the result is
quantized to the configured bit depth.  A deterministic mean mode with all
randomness disabled exists so that key realizations can be checked exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from .errors import (
    FormatError,
    ParameterError,
    ShapeError,
    UnsupportedExactError,
)
from .keys import KeyMatrix

GAUSSIAN_APPROX_MEAN = 1000.0


@dataclass
class FiberBundleConfig:
    """Geometry and optics of one 3D-printed faceplate."""

    image_shape: tuple[int, int]
    pad: int = 0
    core_shape: tuple[int, int] = (1, 1)
    area_ratio: float = 1.0
    shear: float = 0.0
    blocking: float = 0.0
    crosstalk_v: float = 0.0
    crosstalk_h: float = 0.0
    routing: np.ndarray | None = None

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.core_shape = tuple(int(s) for s in self.core_shape)
        h, w = self.image_shape
        ch, cw = self.core_shape
        if ch < 1 or cw < 1:
            raise ParameterError(f"core size must be >= 1 px, got {self.core_shape}")
        if ch > h + 2 * self.pad or cw > w + 2 * self.pad:
            raise ParameterError(f"core {self.core_shape} larger than image {self.image_shape}")
        if not (0.0 < self.area_ratio <= 1.0):
            raise ParameterError(f"core/cladding area ratio must be in (0, 1], got {self.area_ratio}")
        if not (0.0 <= self.blocking <= 1.0):
            raise ParameterError(f"blocking value must be in [0, 1], got {self.blocking}")
        if self.crosstalk_v < 0 or self.crosstalk_h < 0:
            raise ParameterError("crosstalk coefficients must be >= 0")
        if self.pad < 0:
            raise ParameterError(f"pad must be >= 0, got {self.pad}")
        if self.routing is not None:
            self.routing = np.asarray(self.routing, dtype=np.int64)

    def grid_shape(self) -> tuple[int, int]:
        h, w = self.image_shape
        ch, cw = self.core_shape
        canvas_h, canvas_w = h + 2 * self.pad, w + 2 * self.pad
        n_rows = -(-canvas_h // ch)
        max_shift = max(self._row_shift(r) for r in range(n_rows))
        n_cols = -(-(canvas_w + max_shift) // cw)
        return n_rows, n_cols

    def _row_shift(self, row: int) -> int:
        brick = self.core_shape[1] // 2 if row % 2 else 0
        return brick + int(round(self.shear * row))

    def as_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "pad": self.pad,
            "core_shape": list(self.core_shape),
            "area_ratio": self.area_ratio,
            "shear": self.shear,
            "blocking": self.blocking,
            "crosstalk_v": self.crosstalk_v,
            "crosstalk_h": self.crosstalk_h,
            "routing": None if self.routing is None else [int(i) for i in self.routing],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FiberBundleConfig":
        doc = dict(doc)
        doc["image_shape"] = tuple(doc["image_shape"])
        doc["core_shape"] = tuple(doc.get("core_shape", (1, 1)))
        return cls(**doc)


@dataclass
class CmosConfig:
    """Sensor noise model parameters; gains and biases may be per pixel.

    Dark electrons are drawn Poisson with mean dark_mean + dark_slope * t_int,
    so the sampled dark variance equals that mean; keep dark_var == dark_mean
    if the closed-form variance is meant to describe the sampler.
    """

    pixels: tuple[int, int]
    quantum_efficiency: float = 1.0
    dark_mean: float = 0.0
    dark_var: float = 0.0
    dark_slope: float = 0.0
    t_int: float = 0.0
    gain: float | np.ndarray = 1.0
    bias: float | np.ndarray = 0.0
    adc_depth: int = 16
    adc_noise_var: float = 0.0

    def __post_init__(self):
        self.pixels = tuple(int(s) for s in self.pixels)
        if not (0.0 <= self.quantum_efficiency <= 1.0):
            raise ParameterError(f"quantum efficiency must be in [0, 1], got {self.quantum_efficiency}")
        if not (8 <= self.adc_depth <= 16):
            raise ParameterError(f"ADC depth must be in [8, 16], got {self.adc_depth}")
        if self.t_int < 0:
            raise ParameterError(f"integration time must be >= 0, got {self.t_int}")
        if min(self.dark_mean, self.dark_var, self.dark_slope, self.adc_noise_var) < 0:
            raise ParameterError("noise parameters must be >= 0")
        if isinstance(self.gain, np.ndarray) or np.ndim(self.gain):
            self.gain = np.asarray(self.gain, dtype=np.float64)
            if self.gain.shape != self.pixels:
                raise ShapeError(f"gain matrix {self.gain.shape} != pixel grid {self.pixels}")
        if isinstance(self.bias, np.ndarray) or np.ndim(self.bias):
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != self.pixels:
                raise ShapeError(f"bias matrix {self.bias.shape} != pixel grid {self.pixels}")

    @property
    def adc_max(self) -> int:
        return (1 << self.adc_depth) - 1

    def dark_electron_mean(self) -> float:
        return self.dark_mean + self.dark_slope * self.t_int

    def dark_electron_var(self) -> float:
        return self.dark_var + self.dark_slope * self.t_int

    def as_dict(self) -> dict:
        def enc(v):
            return v.tolist() if isinstance(v, np.ndarray) else v

        return {
            "pixels": list(self.pixels),
            "quantum_efficiency": self.quantum_efficiency,
            "dark_mean": self.dark_mean,
            "dark_var": self.dark_var,
            "dark_slope": self.dark_slope,
            "t_int": self.t_int,
            "gain": enc(self.gain),
            "bias": enc(self.bias),
            "adc_depth": self.adc_depth,
            "adc_noise_var": self.adc_noise_var,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CmosConfig":
        doc = dict(doc)
        doc["pixels"] = tuple(doc["pixels"])
        for key in ("gain", "bias"):
            if isinstance(doc.get(key), list):
                doc[key] = np.asarray(doc[key], dtype=np.float64)
        return cls(**doc)


def _core_cells(cfg: FiberBundleConfig):
    """Yield (core_row, core_col, row_slice, col_slice, open_rows, open_cols)."""
    ch, cw = cfg.core_shape
    n_rows, n_cols = cfg.grid_shape()
    canvas_h = cfg.image_shape[0] + 2 * cfg.pad
    canvas_w = cfg.image_shape[1] + 2 * cfg.pad
    open_h = max(1, int(round(ch * np.sqrt(cfg.area_ratio))))
    open_w = max(1, int(round(cw * np.sqrt(cfg.area_ratio))))
    or0 = (ch - open_h) // 2
    oc0 = (cw - open_w) // 2
    for r in range(n_rows):
        shift = cfg._row_shift(r)
        r0 = r * ch
        for c in range(n_cols):
            c0 = c * cw - shift
            open_r = (max(r0 + or0, 0), min(r0 + or0 + open_h, canvas_h))
            open_c = (max(c0 + oc0, 0), min(c0 + oc0 + open_w, canvas_w))
            yield r, c, (max(r0, 0), min(r0 + ch, canvas_h)), (max(c0, 0), min(c0 + cw, canvas_w)), open_r, open_c


def simulate_fiber_bundle(img: np.ndarray, cfg: FiberBundleConfig, seed=None) -> np.ndarray:
    """Transmit an image through the simulated faceplate.

    The current model is fully deterministic; ``seed`` is accepted for
    interface symmetry with the CMOS stage and reserved for stochastic
    manufacturing defects.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape != cfg.image_shape:
        raise ShapeError(f"image {img.shape} does not match configured {cfg.image_shape}")
    h, w = cfg.image_shape
    pad = cfg.pad
    canvas = np.zeros((h + 2 * pad, w + 2 * pad))
    canvas[pad : pad + h, pad : pad + w] = img
    img_max = float(img.max(initial=0.0))

    n_rows, n_cols = cfg.grid_shape()
    vals = np.zeros((n_rows, n_cols))
    cells = list(_core_cells(cfg))
    for r, c, _, _, (orl, orh), (ocl, och) in cells:
        if orl < orh and ocl < och:
            patch = canvas[orl:orh, ocl:och]
            vals[r, c] = patch.sum() / patch.size

    if cfg.routing is not None:
        flat = vals.ravel()
        if cfg.routing.shape != flat.shape or not np.array_equal(
            np.sort(cfg.routing), np.arange(flat.size)
        ):
            raise ParameterError(
                f"routing map must be a permutation of {flat.size} core indices"
            )
        routed = np.empty_like(flat)
        routed[cfg.routing] = flat
        vals = routed.reshape(vals.shape)

    if cfg.crosstalk_v > 0 or cfg.crosstalk_h > 0:
        padded = np.zeros((n_rows + 2, n_cols + 2))
        padded[1:-1, 1:-1] = vals
        mixed = vals.copy()
        # Brick layout: the four nearest vertical neighbors sit at columns c
        # and c -/+ 1 depending on which row is shifted.
        for r in range(n_rows):
            d = 1 if r % 2 else -1
            up = padded[r, 1:-1] + padded[r, 1 + d : n_cols + 1 + d]
            dn = padded[r + 2, 1:-1] + padded[r + 2, 1 + d : n_cols + 1 + d]
            mixed[r] += cfg.crosstalk_v * (up + dn)
        mixed += cfg.crosstalk_h * (padded[1:-1, :-2] + padded[1:-1, 2:])
        peak = mixed.max(initial=0.0)
        if peak > 0 and img_max > 0:
            mixed *= img_max / peak
        vals = mixed

    out = np.full_like(canvas, cfg.blocking * img_max)
    for r, c, _, _, (orl, orh), (ocl, och) in cells:
        if orl < orh and ocl < och:
            out[orl:orh, ocl:och] = vals[r, c]
    return out[pad : pad + h, pad : pad + w]


def _poisson_or_gaussian(rng: np.random.Generator, mean: np.ndarray) -> np.ndarray:
    """Poisson draws, switching to the Gaussian approximation for large means."""
    mean = np.asarray(mean, dtype=np.float64)
    out = np.empty_like(mean)
    big = mean > GAUSSIAN_APPROX_MEAN
    if big.any():
        out[big] = rng.normal(mean[big], np.sqrt(mean[big]))
    if (~big).any():
        out[~big] = rng.poisson(mean[~big])
    return out


def simulate_cmos(
    img_photons: np.ndarray,
    cfg: CmosConfig,
    seed=None,
    mean_mode: bool = False,
    quantize: bool = True,
) -> np.ndarray:
    """Convert a photon image to digital counts.

    ``mean_mode`` replaces every random draw by its mean (noise fully off);
    ``quantize=False`` returns the analog signal in counts before rounding.
    """
    img = np.asarray(img_photons, dtype=np.float64)
    if img.shape != cfg.pixels:
        raise ShapeError(f"image {img.shape} does not match pixel grid {cfg.pixels}")
    if img.min(initial=0.0) < 0:
        raise ParameterError("photon counts must be >= 0")
    rng = np.random.default_rng(seed)

    mu_e = cfg.quantum_efficiency * img
    electrons = mu_e if mean_mode else _poisson_or_gaussian(rng, mu_e)
    mu_dark = cfg.dark_electron_mean()
    if mean_mode or mu_dark == 0.0:
        dark = mu_dark
    else:
        dark = _poisson_or_gaussian(rng, np.full(cfg.pixels, mu_dark))
    signal = cfg.gain * (electrons + dark) + cfg.bias
    if not mean_mode and cfg.adc_noise_var > 0:
        signal = signal + rng.normal(0.0, np.sqrt(cfg.adc_noise_var), cfg.pixels)
    if not quantize:
        return signal
    return np.clip(np.rint(signal), 0, cfg.adc_max).astype(np.uint16)


def cmos_mean(cfg: CmosConfig, mu_photons) -> np.ndarray:
    """Closed-form expected counts: gain * (qe * photons + dark) + bias."""
    return cfg.gain * (cfg.quantum_efficiency * np.asarray(mu_photons, dtype=np.float64)
                       + cfg.dark_electron_mean()) + cfg.bias


def cmos_variance(cfg: CmosConfig, mu_photons) -> np.ndarray:
    """Closed-form count variance: gain^2 (dark var + shot) + ADC noise."""
    g2 = np.square(cfg.gain)
    mu_e = cfg.quantum_efficiency * np.asarray(mu_photons, dtype=np.float64)
    return g2 * cfg.dark_electron_var() + cfg.adc_noise_var + g2 * mu_e


# ---------------------------------------------------------------------------
# Mapping an image key onto optics plus analog parameters.
# ---------------------------------------------------------------------------


@dataclass
class KeyRealization:
    """Sensor configs that realize a key, with an exactness statement."""

    fiber: FiberBundleConfig
    cmos: CmosConfig
    exact: bool
    mixing_residual: float


def realize_key(
    key: KeyMatrix,
    image_shape: tuple[int, int],
    adc_depth: int = 16,
    require_exact: bool = False,
) -> KeyRealization:
    """Map a key onto fiber routing plus per-pixel analog gain and bias.

    A scaled-permutation key (alpha == 1) is realized exactly: the
    permutation becomes the fiber routing map and the gains and bias become
    the analog stage.  Softer keys only admit an approximation: the dominant
    assignment becomes the routing, the leaked off-assignment mass is mapped
    to crosstalk, and the unmodeled remainder is reported as a residual.
    """
    h, w = image_shape
    if h * w != key.dim:
        raise ShapeError(f"image {image_shape} has {h * w} pixels, key dim is {key.dim}")
    core = key.forward_core
    bias_vec = np.zeros(key.dim)
    aug = key.forward
    bias_entries = (aug.col == key.dim) & (aug.row < key.dim)
    bias_vec[aug.row[bias_entries]] = aug.val[bias_entries]

    if key.alpha == 1:
        # One entry per row: read the permutation and gains straight off.
        gains = np.zeros(key.dim)
        routing = np.zeros(key.dim, dtype=np.int64)
        gains[core.row] = core.val
        routing[core.col] = core.row
        fiber = FiberBundleConfig(image_shape=image_shape, routing=routing)
        cmos = CmosConfig(
            pixels=image_shape,
            gain=gains.reshape(image_shape),
            bias=bias_vec.reshape(image_shape),
            adc_depth=adc_depth,
        )
        return KeyRealization(fiber=fiber, cmos=cmos, exact=True, mixing_residual=0.0)

    if require_exact:
        raise UnsupportedExactError(
            f"alpha={key.alpha} keys mix pixels and have no exact optical realization"
        )

    # Dominant assignment: the maximum-weight perfect matching of the key's
    # sparsity pattern (which always contains one, thanks to block dominance).
    cost = csr_matrix(
        (core.val.max() + 1.0 - core.val, (core.row, core.col)), shape=core.shape
    )
    match_row, match_col = min_weight_full_bipartite_matching(cost)
    match_col = match_col[np.argsort(match_row)]
    gains = np.asarray(core.to_dense()[np.arange(key.dim), match_col])
    routing = np.zeros(key.dim, dtype=np.int64)
    routing[match_col] = np.arange(key.dim)

    matched_mass = gains.sum()
    total_mass = core.val.sum()
    row_sums = np.bincount(core.row, weights=core.val, minlength=key.dim)
    leak = float(np.mean((row_sums - gains) / np.where(row_sums > 0, row_sums, 1.0)))
    crosstalk = leak / 6.0  # spread over the six nearest neighbors

    dense = core.to_dense()
    realized = np.zeros_like(dense)
    realized[np.arange(key.dim), match_col] = gains
    residual = float(
        np.linalg.norm(dense - realized) / max(np.linalg.norm(dense), 1e-300)
    )
    fiber = FiberBundleConfig(
        image_shape=image_shape,
        routing=routing,
        crosstalk_v=crosstalk,
        crosstalk_h=crosstalk,
    )
    cmos = CmosConfig(
        pixels=image_shape,
        gain=gains.reshape(image_shape),
        bias=bias_vec.reshape(image_shape),
        adc_depth=adc_depth,
    )
    return KeyRealization(fiber=fiber, cmos=cmos, exact=False, mixing_residual=residual)


def realization_report(
    key: KeyMatrix,
    realization: KeyRealization,
    img: np.ndarray,
    seed=None,
    mean_mode: bool = True,
) -> dict:
    """Run the optics+sensor pipeline and compare against the ideal key.

    Returns the per-pixel deviation in ADC steps.  Equality is never
    asserted: soft keys and enabled noise legitimately deviate, and the
    report is the artifact.
    """
    img = np.asarray(img, dtype=np.float64)
    optical = simulate_fiber_bundle(img, realization.fiber, seed)
    digital = simulate_cmos(optical, realization.cmos, seed, mean_mode=mean_mode)
    vec = np.concatenate([img.ravel(), [1.0]])
    from .keys import key_apply

    ideal = key_apply(key, vec)[:-1].reshape(img.shape)
    dev = np.abs(digital.astype(np.float64) - ideal)
    return {
        "exact": realization.exact,
        "mixing_residual": realization.mixing_residual,
        "max_abs_dev_counts": float(dev.max(initial=0.0)),
        "mean_abs_dev_counts": float(dev.mean()) if dev.size else 0.0,
        "adc_steps": float(dev.max(initial=0.0)),
        "clipped": bool(
            (ideal > realization.cmos.adc_max).any() or (ideal < 0).any()
        ),
    }


# ---------------------------------------------------------------------------
# Image I/O: binary PGM (P5) at 8 or 16 bits, and raw f64 with a JSON sidecar.
# ---------------------------------------------------------------------------


def write_pgm(img: np.ndarray, path, maxval: int = 255) -> None:
    if not (0 < maxval < 65536):
        raise ParameterError(f"PGM maxval must be in [1, 65535], got {maxval}")
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError("PGM images are single channel 2-D")
    data = np.clip(np.rint(img.astype(np.float64)), 0, maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    # 16-bit PGM samples are big-endian per the format.
    body = data.astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path} is not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(blob, dtype=dtype, count=h * w, offset=pos).reshape(h, w)
    return img.astype(np.int64), maxval


def write_raw(img: np.ndarray, path) -> None:
    """Raw f64 little-endian blob plus a {h, w, channels} JSON sidecar."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        h, w = img.shape
        channels = 1
    elif img.ndim == 3:
        channels, h, w = img.shape
    else:
        raise ShapeError("raw images must be 2-D or CHW 3-D")
    path = Path(path)
    path.write_bytes(img.astype("<f8").tobytes())
    sidecar = {"h": h, "w": w, "channels": channels}
    path.with_name(path.name + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def read_raw(path) -> np.ndarray:
    path = Path(path)
    try:
        sidecar = json.loads(path.with_name(path.name + ".json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable raw-image sidecar: {exc}") from exc
    h, w, channels = int(sidecar["h"]), int(sidecar["w"]), int(sidecar["channels"])
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    if data.size != h * w * channels:
        raise FormatError(f"raw blob holds {data.size} values, expected {h * w * channels}")
    if channels == 1:
        return data.reshape(h, w).copy()
    return data.reshape(channels, h, w).copy()
