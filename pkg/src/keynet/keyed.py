"""Key assignment, keyed-network construction, and encrypted inference.

A lowered network with matrices ``W_1 ... W_k`` is keyed by a chain of
boundary keys ``A_0 ... A_k``: every linear layer becomes the materialized
triple product ``A_i @ W_i @ inverse(A_{i-1})`` and every rectifier becomes a
mixing matrix ``A_i @ inverse(A_{i-1})``.  Telescoping makes inference on the
transformed input ``A_0 x`` produce exactly ``A_k`` times the plain output;
rectifier boundaries carry bias-free scaled permutations, the family the
rectifier commutes with, so the identity survives the nonlinearity.

The public artifact stores only the products, never a key: the sole trace of
the image key is a hash binding encoded inputs to the network they belong to.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    FormatError,
    ParameterError,
    ShapeError,
    WrongSensorError,
)
from .keys import (
    KeyGenConfig,
    KeyMatrix,
    derive_seed,
    gen_key,
    gen_relu_key,
    identity_key,
    key_apply,
    key_unapply,
    load_key,
    save_key,
)
from .network import (
    LoweredNetwork,
    NetworkDef,
    Relu,
    ReluMarker,
    SparseAffine,
    devectorize,
    infer_shapes,
    lower_network,
    relu_homogeneous,
    vectorize,
)
from .sparse import (
    CooMatrix,
    coo_matmul,
    coo_matvec,
    from_tiled,
    kspm_from_bytes,
    kstm_from_bytes,
    to_tiled,
    write_kspm,
    write_kstm,
)


def _core_nnz(m: CooMatrix) -> int:
    return int(((m.row < m.rows - 1) & (m.col < m.cols - 1)).sum())


@dataclass
class KeyChain:
    """Secret per-boundary keys A_0 ... A_k plus the boundary shapes."""

    alpha: int
    seed: int
    keys: list
    shapes: list

    @property
    def dims(self) -> list:
        return [int(np.prod(s)) for s in self.shapes]

    @property
    def fingerprint(self) -> str:
        return self.keys[0].fingerprint


@dataclass
class EncodedImage:
    """A key-transformed image: A_0 @ [x; 1], tagged with the key's hash."""

    vec: np.ndarray
    fingerprint: str

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float64)
        if self.vec[-1] != 1.0:
            raise ContractError("encoded image lost its homogeneous coordinate")


@dataclass
class KeyedLinear:
    aff: SparseAffine


@dataclass
class KeyedRelu:
    aff: SparseAffine


@dataclass
class KeyedNetwork:
    """The public artifact: keyed layer matrices plus shape metadata."""

    alpha: int
    fingerprint: str
    steps: list
    shapes: list
    input_shape: tuple
    output_shape: tuple


def assign_keys(
    net: NetworkDef,
    alpha: int,
    seed: int,
    output_public: bool = True,
    identity: bool = False,
) -> KeyChain:
    """Pick one key per layer boundary.

    Linear-layer boundaries get alpha-keys with bias; rectifier boundaries get
    bias-free scaled permutations; the output boundary is the identity when
    the result is public.  A boundary smaller than alpha gets the largest
    softness it can carry (alpha is capped at the boundary dimension).
    ``identity`` forces every key to the identity (debug mode: the keyed
    network then equals the plain one).
    """
    if alpha < 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    shapes = infer_shapes(net)
    dims = [int(np.prod(s)) for s in shapes]
    n_layers = len(net.layers)
    chain = []
    for i in range(n_layers + 1):
        dim = dims[i]
        if identity:
            chain.append(identity_key(dim))
            continue
        sub_seed = derive_seed(seed, i)
        if i == n_layers and output_public:
            chain.append(identity_key(dim))
        elif i > 0 and isinstance(net.layers[i - 1], Relu):
            chain.append(gen_relu_key(dim, sub_seed))
        else:
            chain.append(
                gen_key(KeyGenConfig(dim=dim, alpha=min(alpha, dim), seed=sub_seed))
            )
    return KeyChain(alpha=alpha, seed=seed, keys=chain, shapes=shapes)


def build_keynet(lowered: LoweredNetwork, chain: KeyChain) -> KeyedNetwork:
    """Materialize the keyed layers.  Only products leave this function.

    The core of each keyed linear layer has at most alpha^2 times the
    nonzeros of the source layer; the audit in :func:`memory_stats` checks
    that bound layer by layer.
    """
    dims = [int(np.prod(s)) for s in lowered.shapes]
    if len(chain.keys) != len(lowered.steps) + 1:
        raise ShapeError(
            f"chain has {len(chain.keys)} keys for {len(lowered.steps)} layers"
        )
    for key, dim in zip(chain.keys, dims):
        if key.dim != dim:
            raise ShapeError(f"key dim {key.dim} does not match boundary dim {dim}")

    steps = []
    for i, step in enumerate(lowered.steps, start=1):
        post, pre = chain.keys[i], chain.keys[i - 1]
        if isinstance(step, ReluMarker):
            if post.alpha != 1 or post.has_bias:
                raise ContractError(
                    f"boundary {i} feeds a rectifier and needs a bias-free "
                    f"scaled permutation, got alpha={post.alpha}, bias={post.has_bias}"
                )
            mix = coo_matmul(post.forward, pre.inverse)
            shape = lowered.shapes[i]
            steps.append(KeyedRelu(SparseAffine(mix, shape, shape, "relu-mix")))
        else:
            keyed = coo_matmul(coo_matmul(post.forward, step.matrix), pre.inverse)
            steps.append(
                KeyedLinear(SparseAffine(keyed, step.in_shape, step.out_shape, step.kind))
            )
    return KeyedNetwork(
        alpha=chain.alpha,
        fingerprint=chain.fingerprint,
        steps=steps,
        shapes=list(lowered.shapes),
        input_shape=lowered.input_shape,
        output_shape=lowered.output_shape,
    )


def encode_image(x, chain: KeyChain) -> EncodedImage:
    """Transform a raw tensor with the image key: the sensor's job."""
    v = vectorize(x)
    if v.shape[0] != chain.dims[0] + 1:
        raise ShapeError(
            f"image of {v.shape[0] - 1} elements does not match input dim {chain.dims[0]}"
        )
    return EncodedImage(key_apply(chain.keys[0], v), chain.fingerprint)


def decode_image(chain: KeyChain, encoded: EncodedImage) -> np.ndarray:
    """Recover the raw tensor from an encoded image (requires the secret key)."""
    if encoded.fingerprint != chain.fingerprint:
        raise WrongSensorError("encoded image does not belong to this key chain")
    return devectorize(key_unapply(chain.keys[0], encoded.vec), chain.shapes[0])


def keyed_forward(kn: KeyedNetwork, encoded: EncodedImage) -> np.ndarray:
    """Inference on the transformed input; returns A_k times the plain output."""
    if encoded.fingerprint != kn.fingerprint:
        raise WrongSensorError(
            "encoded image was produced by a different sensor than this network is keyed to"
        )
    cur = encoded.vec
    for step in kn.steps:
        cur = coo_matvec(step.aff.matrix, cur)
        if isinstance(step, KeyedRelu):
            cur = relu_homogeneous(cur)
    return cur


def decode_output(chain: KeyChain, y_hat: np.ndarray) -> np.ndarray:
    """Strip the output key from a keyed inference result."""
    return key_unapply(chain.keys[-1], y_hat)


@dataclass
class VerifyReport:
    """Outcome of the homomorphism check: keyed path vs keyed plain output."""

    trials: int
    tol: float
    max_rel_err: float
    passed: bool
    per_layer: list
    failing_layer: int | None

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "per_layer": self.per_layer,
            "failing_layer": self.failing_layer,
        }


def verify_homomorphism(
    net: NetworkDef,
    chain: KeyChain,
    trials: int = 20,
    tol: float = 1e-6,
    seed: int = 0,
    keyed: KeyedNetwork | None = None,
) -> VerifyReport:
    """Check A_k @ plain(x) == keyed(A_0 @ x) on random inputs.

    Residuals are tracked per layer boundary, so a corrupted keyed layer is
    localized as the first boundary whose residual exceeds the tolerance.
    """
    lowered = lower_network(net)
    if keyed is None:
        keyed = build_keynet(lowered, chain)
    if len(keyed.steps) != len(lowered.steps):
        raise ShapeError("keyed network does not match the model's layer count")

    rng = np.random.default_rng(seed)
    n = len(lowered.steps)
    layer_err = np.zeros(n)
    for _ in range(trials):
        x = rng.standard_normal(lowered.input_shape)
        plain = vectorize(x)
        hat = coo_matvec(chain.keys[0].forward, plain)
        for i, (pstep, kstep) in enumerate(zip(lowered.steps, keyed.steps)):
            if isinstance(pstep, ReluMarker):
                plain = relu_homogeneous(plain)
            else:
                plain = coo_matvec(pstep.matrix, plain)
            hat = coo_matvec(kstep.aff.matrix, hat)
            if isinstance(kstep, KeyedRelu):
                hat = relu_homogeneous(hat)
            ref = coo_matvec(chain.keys[i + 1].forward, plain)
            denom = 1.0 + np.abs(ref).max(initial=0.0)
            err = np.abs(hat - ref).max(initial=0.0) / denom
            layer_err[i] = max(layer_err[i], err)

    max_err = float(layer_err[-1]) if n else 0.0
    failing = None
    for i in range(n):
        if layer_err[i] > tol:
            failing = i
            break
    per_layer = [
        {"index": i, "kind": keyed.steps[i].aff.kind, "max_rel_err": float(layer_err[i])}
        for i in range(n)
    ]
    return VerifyReport(
        trials=trials,
        tol=tol,
        max_rel_err=max_err,
        passed=bool(max_err <= tol and failing is None),
        per_layer=per_layer,
        failing_layer=failing,
    )


def memory_stats(kn: KeyedNetwork, plain: LoweredNetwork, tile_size: int = 16) -> dict:
    """Per-layer nonzero counts, keyed/plain growth ratio, and storage sizes.

    Growth ratios are measured on the non-augmented blocks.  Tiled sizes are
    reported for the plain matrices (whose convolution structure repeats
    tiles) and for the keyed ones.  Rectifier steps are compared against the
    identity mixing they replace.
    """
    layers = []
    for i, (pstep, kstep) in enumerate(zip(plain.steps, kn.steps)):
        keyed_m = kstep.aff.matrix
        keyed_core = _core_nnz(keyed_m)
        entry = {
            "index": i,
            "kind": kstep.aff.kind,
            "keyed_nnz": keyed_core,
            "keyed_coo_bytes": keyed_m.stored_bytes(),
            "keyed_tiled_bytes": to_tiled(keyed_m, tile_size).stored_bytes(),
        }
        if isinstance(pstep, ReluMarker):
            entry["plain_nnz"] = pstep.dim
            entry["plain_coo_bytes"] = None
            entry["plain_tiled_bytes"] = None
            entry["ratio"] = keyed_core / pstep.dim
        else:
            plain_m = pstep.matrix
            plain_core = _core_nnz(plain_m)
            entry["plain_nnz"] = plain_core
            entry["plain_coo_bytes"] = plain_m.stored_bytes()
            entry["plain_tiled_bytes"] = to_tiled(plain_m, tile_size).stored_bytes()
            entry["ratio"] = keyed_core / plain_core if plain_core else 0.0
        layers.append(entry)
    plain_total = sum(e["plain_nnz"] for e in layers)
    keyed_total = sum(e["keyed_nnz"] for e in layers)
    return {
        "alpha": kn.alpha,
        "tile_size": tile_size,
        "layers": layers,
        "totals": {
            "plain_nnz": plain_total,
            "keyed_nnz": keyed_total,
            "ratio": keyed_total / plain_total if plain_total else 0.0,
        },
    }


# ---------------------------------------------------------------------------
# Containers.
#
# Keyed network: manifest.json plus one KSPM (or tiled KSTM) blob per layer.
# Key chain:     chain.json plus one key-file triple per boundary (secret!).
# Encoded image: raw f64 blob plus a JSON sidecar with the key fingerprint.
# ---------------------------------------------------------------------------


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_keynet(kn: KeyedNetwork, directory, tiled: bool = False, tile_size: int = 16) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, step in enumerate(kn.steps):
        name = f"layer{i:03d}." + ("kstm" if tiled else "kspm")
        if tiled:
            write_kstm(to_tiled(step.aff.matrix, tile_size), directory / name)
        else:
            write_kspm(step.aff.matrix, directory / name)
        layers.append(
            {
                "index": i,
                "step": "relu" if isinstance(step, KeyedRelu) else "linear",
                "op": step.aff.kind,
                "in_shape": list(step.aff.in_shape),
                "out_shape": list(step.aff.out_shape),
                "file": name,
                "sha256": _sha256_bytes((directory / name).read_bytes()),
            }
        )
    manifest = {
        "format": "keynet-keyed",
        "version": 1,
        "alpha": kn.alpha,
        "fingerprint": kn.fingerprint,
        "input_shape": list(kn.input_shape),
        "output_shape": list(kn.output_shape),
        "shapes": [list(s) for s in kn.shapes],
        "tiled": tiled,
        "tile_size": tile_size if tiled else None,
        "layers": layers,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_keynet(directory) -> KeyedNetwork:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable keyed-network manifest: {exc}") from exc
    if manifest.get("format") != "keynet-keyed":
        raise FormatError(f"{directory} does not hold a keyed network")
    steps = []
    for entry in manifest["layers"]:
        blob_path = directory / entry["file"]
        data = blob_path.read_bytes()
        if _sha256_bytes(data) != entry["sha256"]:
            raise FormatError(f"checksum mismatch for {blob_path}")
        if entry["file"].endswith(".kstm"):
            matrix = from_tiled(kstm_from_bytes(data))
        else:
            matrix = kspm_from_bytes(data)
        aff = SparseAffine(
            matrix, tuple(entry["in_shape"]), tuple(entry["out_shape"]), entry["op"]
        )
        steps.append(KeyedRelu(aff) if entry["step"] == "relu" else KeyedLinear(aff))
    return KeyedNetwork(
        alpha=int(manifest["alpha"]),
        fingerprint=manifest["fingerprint"],
        steps=steps,
        shapes=[tuple(s) for s in manifest["shapes"]],
        input_shape=tuple(manifest["input_shape"]),
        output_shape=tuple(manifest["output_shape"]),
    )


def save_keychain(chain: KeyChain, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    boundaries = []
    for i, key in enumerate(chain.keys):
        prefix = f"b{i:03d}"
        save_key(key, directory, prefix=prefix)
        boundaries.append({"index": i, "prefix": prefix})
    manifest = {
        "format": "keynet-keychain",
        "version": 1,
        "alpha": chain.alpha,
        "seed": chain.seed,
        "shapes": [list(s) for s in chain.shapes],
        "fingerprint": chain.fingerprint,
        "boundaries": boundaries,
    }
    path = directory / "chain.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_keychain(directory) -> KeyChain:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "chain.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable key-chain manifest: {exc}") from exc
    if manifest.get("format") != "keynet-keychain":
        raise FormatError(f"{directory} does not hold a key chain")
    keys = [load_key(directory, prefix=entry["prefix"]) for entry in manifest["boundaries"]]
    return KeyChain(
        alpha=int(manifest["alpha"]),
        seed=int(manifest["seed"]),
        keys=keys,
        shapes=[tuple(s) for s in manifest["shapes"]],
    )


def save_encoded(encoded: EncodedImage, path) -> Path:
    path = Path(path)
    blob = encoded.vec.astype("<f8").tobytes()
    path.write_bytes(blob)
    sidecar = {
        "format": "keynet-encoded",
        "version": 1,
        "length": int(encoded.vec.shape[0]),
        "fingerprint": encoded.fingerprint,
        "sha256": _sha256_bytes(blob),
    }
    side_path = path.with_name(path.name + ".json")
    side_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return side_path


def load_encoded(path) -> EncodedImage:
    path = Path(path)
    side_path = path.with_name(path.name + ".json")
    try:
        sidecar = json.loads(side_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable encoded-image sidecar: {exc}") from exc
    if sidecar.get("format") != "keynet-encoded":
        raise FormatError(f"{side_path} is not an encoded-image sidecar")
    blob = path.read_bytes()
    if _sha256_bytes(blob) != sidecar["sha256"]:
        raise FormatError(f"checksum mismatch for {path}")
    vec = np.frombuffer(blob, dtype="<f8")
    if vec.shape[0] != sidecar["length"]:
        raise FormatError(f"encoded blob length {vec.shape[0]} != {sidecar['length']}")
    return EncodedImage(vec.copy(), sidecar["fingerprint"])
