"""Network description, shape inference, and lowering to sparse affine form.

Layers are lowered to matrices acting on homogeneous vectors: a tensor is
flattened channel-major then row-major then column-major, a constant 1 is
appended, and every linear layer becomes a sparse matrix [W b; 0 1] whose
augmented column carries the bias.  Rectifiers stay as markers; everything
else (convolution, average pooling, fully connected) becomes one matrix, with
stride realized by emitting only the surviving output rows.

Only zero padding is supported, and the only nonlinearity is the rectifier.
Anything else is rejected when a model is loaded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError, UnsupportedLayerError
from .sparse import CooMatrix, coo_matvec

REJECTED_LAYER_KINDS = frozenset(
    {"maxpool", "max_pool", "softmax", "sigmoid", "tanh", "lrn", "local_response_norm"}
)


def _freeze(a, shape=None) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise ShapeError(f"array shape {a.shape}, expected {shape}")
    a.setflags(write=False)
    return a


@dataclass
class Conv2d:
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    weight: np.ndarray = None
    bias: np.ndarray | None = None

    kind = "conv2d"

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {self.kh}x{self.kw}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ShapeError(f"zero padding must be >= 0, got {self.pad}")
        if self.weight is None:
            raise ShapeError("conv2d requires a weight tensor")
        self.weight = _freeze(self.weight, (self.out_ch, self.in_ch, self.kh, self.kw))
        if self.bias is not None:
            self.bias = _freeze(self.bias, (self.out_ch,))


@dataclass
class AvgPool:
    k: int
    stride: int

    kind = "avgpool"

    def __post_init__(self):
        if self.k < 1 or self.stride < 1:
            raise ShapeError(f"pool size and stride must be >= 1, got {self.k}/{self.stride}")


@dataclass
class Dense:
    in_dim: int
    out_dim: int
    weight: np.ndarray = None
    bias: np.ndarray | None = None

    kind = "dense"

    def __post_init__(self):
        if self.weight is None:
            raise ShapeError("dense layers require a weight matrix")
        self.weight = _freeze(self.weight, (self.out_dim, self.in_dim))
        if self.bias is not None:
            self.bias = _freeze(self.bias, (self.out_dim,))


@dataclass
class Relu:
    kind = "relu"


LayerSpec = Conv2d | AvgPool | Dense | Relu


@dataclass
class NetworkDef:
    """Input shape plus an ordered list of layer specs carrying their weights."""

    input_shape: tuple[int, int, int]
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)


@dataclass
class SparseAffine:
    """One lowered linear layer: matrix of shape (out_dim+1) x (in_dim+1)."""

    matrix: CooMatrix
    in_shape: tuple
    out_shape: tuple
    kind: str

    @property
    def in_dim(self) -> int:
        return self.matrix.cols - 1

    @property
    def out_dim(self) -> int:
        return self.matrix.rows - 1


@dataclass
class ReluMarker:
    dim: int
    kind: str = field(default="relu", init=False)


@dataclass
class LoweredNetwork:
    """Alternating sparse affine matrices and rectifier markers."""

    steps: list
    shapes: list
    input_shape: tuple
    output_shape: tuple


def _dim(shape) -> int:
    return int(np.prod(shape))


def infer_shapes(net: NetworkDef) -> list:
    """Boundary shapes, input first.  Raises if a layer cannot be applied."""
    shapes = [tuple(net.input_shape)]
    cur = shapes[0]
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Conv2d):
            if len(cur) != 3:
                raise ShapeError(f"layer {idx}: conv2d needs a CHW input, got {cur}")
            c, h, w = cur
            if c != layer.in_ch:
                raise ShapeError(f"layer {idx}: expects {layer.in_ch} channels, got {c}")
            ho = (h + 2 * layer.pad - layer.kh) // layer.stride + 1
            wo = (w + 2 * layer.pad - layer.kw) // layer.stride + 1
            if h + 2 * layer.pad < layer.kh or w + 2 * layer.pad < layer.kw:
                raise ShapeError(f"layer {idx}: kernel exceeds padded input {cur}")
            cur = (layer.out_ch, ho, wo)
        elif isinstance(layer, AvgPool):
            if len(cur) != 3:
                raise ShapeError(f"layer {idx}: avgpool needs a CHW input, got {cur}")
            c, h, w = cur
            if h < layer.k or w < layer.k:
                raise ShapeError(f"layer {idx}: pool window {layer.k} exceeds input {cur}")
            cur = (c, (h - layer.k) // layer.stride + 1, (w - layer.k) // layer.stride + 1)
        elif isinstance(layer, Dense):
            if _dim(cur) != layer.in_dim:
                raise ShapeError(
                    f"layer {idx}: dense expects {layer.in_dim} inputs, got {_dim(cur)}"
                )
            cur = (layer.out_dim,)
        elif isinstance(layer, Relu):
            pass
        else:
            raise UnsupportedLayerError(f"layer {idx}: unsupported layer {layer!r}")
        shapes.append(cur)
    return shapes


def vectorize(image) -> np.ndarray:
    """Flatten channel-major/row-major/column-major and append the homogeneous 1."""
    image = np.asarray(image, dtype=np.float64)
    flat = image.ravel()
    return np.concatenate([flat, [1.0]])


def devectorize(v: np.ndarray, shape) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != _dim(shape) + 1:
        raise ShapeError(f"vector of length {v.shape[0]} does not devectorize to {shape}")
    return v[:-1].reshape(shape)


def lower_conv2d(spec: Conv2d, in_shape) -> SparseAffine:
    """Convolution as a sparse matrix: the kernel replicated row by row.

    For every input x, devectorize(matrix @ vectorize(x)) equals the direct
    sliding-window cross-correlation with the layer's stride and zero pad.
    """
    c, h, w = in_shape
    if c != spec.in_ch:
        raise ShapeError(f"conv2d expects {spec.in_ch} channels, got {c}")
    ho = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
    wo = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
    if h + 2 * spec.pad < spec.kh or w + 2 * spec.pad < spec.kw:
        raise ShapeError(f"kernel {spec.kh}x{spec.kw} exceeds padded input {in_shape}")
    out_shape = (spec.out_ch, ho, wo)
    in_dim, out_dim = _dim(in_shape), _dim(out_shape)

    o, y, x, i, dy, dx = np.indices((spec.out_ch, ho, wo, c, spec.kh, spec.kw))
    iy = y * spec.stride + dy - spec.pad
    ix = x * spec.stride + dx - spec.pad
    vals = spec.weight[o, i, dy, dx]
    mask = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w) & (vals != 0.0)
    rows = ((o * ho + y) * wo + x)[mask]
    cols = ((i * h + iy) * w + ix)[mask]
    vals = vals[mask]

    entries_r = [rows.ravel(), np.array([out_dim])]
    entries_c = [cols.ravel(), np.array([in_dim])]
    entries_v = [vals.ravel(), np.array([1.0])]
    if spec.bias is not None:
        oo, yy, xx = np.indices((spec.out_ch, ho, wo))
        bvals = np.broadcast_to(spec.bias[:, None, None], oo.shape)
        bmask = bvals != 0.0
        entries_r.insert(1, ((oo * ho + yy) * wo + xx)[bmask])
        entries_c.insert(1, np.full(int(bmask.sum()), in_dim))
        entries_v.insert(1, bvals[bmask])
    matrix = CooMatrix(
        out_dim + 1,
        in_dim + 1,
        np.concatenate(entries_r),
        np.concatenate(entries_c),
        np.concatenate(entries_v),
    )
    return SparseAffine(matrix, tuple(in_shape), out_shape, "conv2d")


def lower_avgpool(spec: AvgPool, in_shape) -> SparseAffine:
    """Average pooling as a sparse matrix: each output row averages one window."""
    c, h, w = in_shape
    if h < spec.k or w < spec.k:
        raise ShapeError(f"pool window {spec.k} exceeds input {in_shape}")
    ho = (h - spec.k) // spec.stride + 1
    wo = (w - spec.k) // spec.stride + 1
    out_shape = (c, ho, wo)
    in_dim, out_dim = _dim(in_shape), _dim(out_shape)

    ch, y, x, dy, dx = np.indices((c, ho, wo, spec.k, spec.k))
    rows = ((ch * ho + y) * wo + x).ravel()
    cols = ((ch * h + y * spec.stride + dy) * w + x * spec.stride + dx).ravel()
    vals = np.full(rows.size, 1.0 / (spec.k * spec.k))
    matrix = CooMatrix(
        out_dim + 1,
        in_dim + 1,
        np.concatenate([rows, [out_dim]]),
        np.concatenate([cols, [in_dim]]),
        np.concatenate([vals, [1.0]]),
    )
    return SparseAffine(matrix, tuple(in_shape), out_shape, "avgpool")


def lower_dense(spec: Dense, in_shape) -> SparseAffine:
    if _dim(in_shape) != spec.in_dim:
        raise ShapeError(f"dense expects {spec.in_dim} inputs, got {_dim(in_shape)}")
    rows, cols = np.nonzero(spec.weight)
    vals = spec.weight[rows, cols]
    entries_r = [rows, np.array([spec.out_dim])]
    entries_c = [cols, np.array([spec.in_dim])]
    entries_v = [vals, np.array([1.0])]
    if spec.bias is not None:
        nz = np.flatnonzero(spec.bias)
        entries_r.insert(1, nz)
        entries_c.insert(1, np.full(nz.size, spec.in_dim))
        entries_v.insert(1, spec.bias[nz])
    matrix = CooMatrix(
        spec.out_dim + 1,
        spec.in_dim + 1,
        np.concatenate(entries_r),
        np.concatenate(entries_c),
        np.concatenate(entries_v),
    )
    return SparseAffine(matrix, tuple(in_shape), (spec.out_dim,), "dense")


def lower_network(net: NetworkDef) -> LoweredNetwork:
    shapes = infer_shapes(net)
    steps = []
    for layer, in_shape in zip(net.layers, shapes):
        if isinstance(layer, Conv2d):
            steps.append(lower_conv2d(layer, in_shape))
        elif isinstance(layer, AvgPool):
            steps.append(lower_avgpool(layer, in_shape))
        elif isinstance(layer, Dense):
            steps.append(lower_dense(layer, in_shape))
        elif isinstance(layer, Relu):
            steps.append(ReluMarker(_dim(in_shape)))
        else:
            raise UnsupportedLayerError(f"unsupported layer {layer!r}")
    return LoweredNetwork(steps, shapes, shapes[0], shapes[-1])


def relu_homogeneous(v: np.ndarray) -> np.ndarray:
    """Elementwise max(0, .) sparing the trailing homogeneous element."""
    out = v.copy()
    np.maximum(out[:-1], 0.0, out=out[:-1])
    return out


def plain_forward(lowered: LoweredNetwork, x: np.ndarray) -> np.ndarray:
    """Reference forward pass on the lowered matrices (unkeyed)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != _dim(lowered.input_shape) + 1:
        raise ShapeError(
            f"input of length {x.shape[0]} does not match shape {lowered.input_shape}"
        )
    if x[-1] != 1.0:
        raise ContractError("forward input must be homogeneous ([x; 1])")
    cur = x
    for step in lowered.steps:
        if isinstance(step, ReluMarker):
            cur = relu_homogeneous(cur)
        else:
            cur = coo_matvec(step.matrix, cur)
    return cur


# ---------------------------------------------------------------------------
# Model container: a directory with manifest.json plus one f64 little-endian
# blob per weight tensor.  A flat JSON file with inline weights is accepted
# for tiny networks.
# ---------------------------------------------------------------------------


def _layer_params(layer) -> dict:
    if isinstance(layer, Conv2d):
        return {
            "kind": "conv2d",
            "in_ch": layer.in_ch,
            "out_ch": layer.out_ch,
            "kh": layer.kh,
            "kw": layer.kw,
            "stride": layer.stride,
            "pad": layer.pad,
        }
    if isinstance(layer, AvgPool):
        return {"kind": "avgpool", "k": layer.k, "stride": layer.stride}
    if isinstance(layer, Dense):
        return {"kind": "dense", "in_dim": layer.in_dim, "out_dim": layer.out_dim}
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    raise UnsupportedLayerError(f"unsupported layer {layer!r}")


def save_model(net: NetworkDef, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    hashes = {}

    def dump(name: str, arr: np.ndarray) -> str:
        blob = np.asarray(arr, dtype="<f8").tobytes()
        (directory / name).write_bytes(blob)
        hashes[name] = hashlib.sha256(blob).hexdigest()
        return name

    for idx, layer in enumerate(net.layers):
        entry = _layer_params(layer)
        if isinstance(layer, (Conv2d, Dense)):
            entry["weight"] = dump(f"layer{idx:03d}.weight.f64", layer.weight)
            entry["bias"] = (
                dump(f"layer{idx:03d}.bias.f64", layer.bias) if layer.bias is not None else None
            )
        layers.append(entry)
    manifest = {
        "format": "keynet-model",
        "version": 1,
        "input_shape": list(net.input_shape),
        "layers": layers,
        "sha256": hashes,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _build_layer(entry: dict, weight=None, bias=None):
    kind = str(entry.get("kind", "")).lower()
    if kind in REJECTED_LAYER_KINDS:
        raise UnsupportedLayerError(f"layer kind {kind!r} is not supported; use relu/avgpool")
    if kind == "conv2d":
        shape = (entry["out_ch"], entry["in_ch"], entry["kh"], entry["kw"])
        return Conv2d(
            entry["in_ch"],
            entry["out_ch"],
            entry["kh"],
            entry["kw"],
            stride=entry.get("stride", 1),
            pad=entry.get("pad", 0),
            weight=np.asarray(weight, dtype=np.float64).reshape(shape),
            bias=None if bias is None else np.asarray(bias, dtype=np.float64),
        )
    if kind == "avgpool":
        return AvgPool(entry["k"], entry.get("stride", entry["k"]))
    if kind == "dense":
        shape = (entry["out_dim"], entry["in_dim"])
        return Dense(
            entry["in_dim"],
            entry["out_dim"],
            weight=np.asarray(weight, dtype=np.float64).reshape(shape),
            bias=None if bias is None else np.asarray(bias, dtype=np.float64),
        )
    if kind == "relu":
        return Relu()
    raise UnsupportedLayerError(f"unknown layer kind {kind!r}")


def load_model(directory) -> NetworkDef:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable model manifest: {exc}") from exc
    if manifest.get("format") != "keynet-model":
        raise FormatError(f"{directory} does not hold a model container")
    hashes = manifest.get("sha256", {})

    def blob(name):
        if name is None:
            return None
        data = (directory / name).read_bytes()
        if name in hashes and hashlib.sha256(data).hexdigest() != hashes[name]:
            raise FormatError(f"checksum mismatch for {name}")
        return np.frombuffer(data, dtype="<f8")

    layers = []
    for entry in manifest["layers"]:
        layers.append(_build_layer(entry, blob(entry.get("weight")), blob(entry.get("bias"))))
    return NetworkDef(tuple(manifest["input_shape"]), layers)


def load_model_json(source) -> NetworkDef:
    """Import a tiny network from a flat JSON file with inline weights."""
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable model JSON: {exc}") from exc
    else:
        doc = source
    layers = []
    for entry in doc["layers"]:
        layers.append(_build_layer(entry, entry.get("weight"), entry.get("bias")))
    return NetworkDef(tuple(doc["input_shape"]), layers)
