"""Command-line entry point wiring the modules into reproducible pipelines.

Conventions: machine-readable JSON (result plus a run manifest) goes to
stdout, human summaries go to stderr, binary artifacts go under ``--out``.
Every randomized subcommand requires an explicit ``--seed``; rerunning with
identical arguments reproduces every output byte for byte, which is why the
manifest records parameters and content hashes but never a timestamp.

Exit codes: 0 success, 1 contract or verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import SsimParams, chosen_plaintext_attack, key_oracle, ssim
from .errors import KeynetError, ParameterError
from .keyed import (
    assign_keys,
    build_keynet,
    decode_image,
    decode_output,
    encode_image,
    keyed_forward,
    load_encoded,
    load_keychain,
    load_keynet,
    memory_stats,
    save_encoded,
    save_keychain,
    save_keynet,
    verify_homomorphism,
)
from .keys import KeyGenConfig, gen_key, key_apply, load_key, save_key
from .network import load_model, load_model_json, lower_network, vectorize
from .sensor import (
    CmosConfig,
    FiberBundleConfig,
    read_pgm,
    read_raw,
    simulate_cmos,
    simulate_fiber_bundle,
    write_pgm,
    write_raw,
)
from .zoo import tiny_demo, tiny_demo_image


def _apply_thread_cap() -> None:
    """Honor KEYNET_THREADS by capping the BLAS worker pools.

    The sparse kernels are single threaded by design; the cap only affects
    dense helper operations that reach a threaded BLAS.
    """
    cap = os.environ.get("KEYNET_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ParameterError(f"KEYNET_THREADS must be an integer, got {cap!r}") from None
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _hash_tree(path) -> dict:
    """Hashes for a file, or for every file under a directory."""
    path = Path(path)
    if path.is_dir():
        return {str(p): _sha256(p) for p in sorted(path.rglob("*")) if p.is_file()}
    return {str(path): _sha256(path)}


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img, _ = read_pgm(path)
        return img.astype(np.float64)
    return read_raw(path)


def _write_image(img: np.ndarray, path, maxval: int | None = None) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(img, path, maxval=maxval if maxval else 255)
    else:
        write_raw(img, path)


def _write_vector(vec: np.ndarray, path, fingerprint: str | None = None) -> None:
    path = Path(path)
    blob = np.asarray(vec, dtype="<f8").tobytes()
    path.write_bytes(blob)
    sidecar = {
        "format": "keynet-vector",
        "length": int(np.asarray(vec).shape[0]),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if fingerprint is not None:
        sidecar["fingerprint"] = fingerprint
    path.with_name(path.name + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def _read_vector(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").copy()


def _load_model_any(path):
    path = Path(path)
    if path.is_file() and path.suffix == ".json":
        return load_model_json(path)
    return load_model(path)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommand implementations.  Each returns (result, inputs, outputs, code):
# paths in inputs/outputs are hashed into the run manifest.
# ---------------------------------------------------------------------------


def cmd_keygen(args):
    cfg = KeyGenConfig(
        dim=args.dim,
        alpha=args.alpha,
        seed=args.seed,
        gain_range=(args.gain_lo, args.gain_hi),
        with_bias=args.bias,
    )
    key = gen_key(cfg)
    out = Path(args.out)
    save_key(key, out)
    _info(f"generated alpha={key.alpha} key of dim {key.dim} -> {out}")
    result = {
        "dim": key.dim,
        "alpha": key.alpha,
        "seed": key.seed,
        "has_bias": key.has_bias,
        "fingerprint": key.fingerprint,
        "nnz_forward": key.forward.nnz,
        "nnz_inverse": key.inverse.nnz,
    }
    return result, [], [out], 0


def cmd_encode(args):
    chain = load_keychain(args.keys)
    img = _read_image(args.image)
    tensor = np.asarray(img, dtype=np.float64).reshape(chain.shapes[0])
    encoded = encode_image(tensor, chain)
    out = Path(args.out)
    save_encoded(encoded, out)
    _info(f"encoded {args.image} under key {encoded.fingerprint[:12]} -> {out}")
    result = {"fingerprint": encoded.fingerprint, "length": int(encoded.vec.shape[0])}
    return result, [Path(args.image)], [out, out.with_name(out.name + ".json")], 0


def cmd_decode_image(args):
    chain = load_keychain(args.keys)
    encoded = load_encoded(args.encoded)
    tensor = decode_image(chain, encoded)
    out = Path(args.out)
    img = tensor[0] if tensor.ndim == 3 and tensor.shape[0] == 1 else tensor
    _write_image(img, out)
    _info(f"decoded image -> {out}")
    return {"shape": list(tensor.shape)}, [Path(args.encoded)], [out], 0


def cmd_build(args):
    net = _load_model_any(args.model)
    chain = assign_keys(net, args.alpha, args.seed, output_public=args.output_public)
    lowered = lower_network(net)
    kn = build_keynet(lowered, chain)
    out = Path(args.out)
    keynet_dir = out / "keynet"
    keys_dir = out / "keys"
    save_keynet(kn, keynet_dir, tiled=args.tiled, tile_size=args.tile_size)
    save_keychain(chain, keys_dir)
    stats = memory_stats(kn, lowered, tile_size=args.tile_size)
    _info(
        f"built keyed network (alpha={args.alpha}, {len(kn.steps)} layers, "
        f"nnz ratio {stats['totals']['ratio']:.2f}) -> {keynet_dir}"
    )
    _info(f"secret keys -> {keys_dir} (keep private)")
    result = {
        "alpha": kn.alpha,
        "fingerprint": kn.fingerprint,
        "layers": len(kn.steps),
        "totals": stats["totals"],
    }
    return result, [], [keynet_dir, keys_dir], 0


def cmd_infer(args):
    kn = load_keynet(args.keynet)
    encoded = load_encoded(args.encoded)
    y = keyed_forward(kn, encoded)
    out = Path(args.out)
    _write_vector(y, out, fingerprint=kn.fingerprint)
    _info(f"keyed inference -> {out}")
    result = {"length": int(y.shape[0])}
    if y.shape[0] <= 33:
        result["values"] = [float(v) for v in y]
    return result, [Path(args.encoded)], [out, out.with_name(out.name + ".json")], 0


def cmd_decode(args):
    chain = load_keychain(args.keys)
    y = _read_vector(args.result)
    decoded = decode_output(chain, y)
    out = Path(args.out)
    _write_vector(decoded, out)
    _info(f"decoded inference result -> {out}")
    result = {"length": int(decoded.shape[0])}
    if decoded.shape[0] <= 33:
        result["values"] = [float(v) for v in decoded]
    return result, [Path(args.result)], [out, out.with_name(out.name + ".json")], 0


def cmd_verify(args):
    net = _load_model_any(args.model)
    chain = load_keychain(args.keys)
    keyed = load_keynet(args.keynet) if args.keynet else None
    report = verify_homomorphism(
        net, chain, trials=args.trials, tol=args.tol, seed=args.seed, keyed=keyed
    )
    if report.passed:
        _info(f"homomorphism holds: max rel err {report.max_rel_err:.3e} <= {args.tol}")
        code = 0
    else:
        _info(
            f"homomorphism VIOLATED at layer {report.failing_layer}: "
            f"max rel err {report.max_rel_err:.3e} > {args.tol}"
        )
        code = 1
    return report.as_dict(), [], [], code


def cmd_stats(args):
    net = _load_model_any(args.model)
    lowered = lower_network(net)
    kn = load_keynet(args.keynet)
    stats = memory_stats(kn, lowered, tile_size=args.tile_size)
    _info(
        f"alpha={stats['alpha']}: total keyed/plain nnz ratio "
        f"{stats['totals']['ratio']:.2f}"
    )
    return stats, [], [], 0


def cmd_simulate(args):
    fiber = FiberBundleConfig.from_dict(json.loads(Path(args.fiber_cfg).read_text()))
    cmos = CmosConfig.from_dict(json.loads(Path(args.cmos_cfg).read_text()))
    img = _read_image(args.infile)
    optical = simulate_fiber_bundle(img, fiber, args.seed)
    digital = simulate_cmos(optical, cmos, args.seed, mean_mode=args.mean_mode)
    out = Path(args.out)
    _write_image(digital.astype(np.float64), out, maxval=cmos.adc_max)
    report = {
        "input_range": [float(img.min()), float(img.max())],
        "output_range": [int(digital.min()), int(digital.max())],
        "adc_depth": cmos.adc_depth,
        "mean_mode": args.mean_mode,
    }
    inputs = [Path(args.fiber_cfg), Path(args.cmos_cfg), Path(args.infile)]
    outputs = [out]
    if args.key:
        key = load_key(args.key)
        vec = np.concatenate([img.ravel(), [1.0]])
        ideal = key_apply(key, vec)[:-1].reshape(img.shape)
        dev = np.abs(digital.astype(np.float64) - ideal)
        report["key_deviation"] = {
            "max_abs_dev_counts": float(dev.max()),
            "mean_abs_dev_counts": float(dev.mean()),
        }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        outputs.append(Path(args.report))
    _info(f"simulated sensor -> {out}")
    return report, inputs, outputs, 0


def cmd_attack(args):
    key = load_key(args.key)
    oracle = key_oracle(key)
    result = chosen_plaintext_attack(
        oracle, key.dim, n_probes=args.n, probes=args.probes, seed=args.seed, tol=args.tol
    )
    _info(
        f"chosen-plaintext attack: {result.probe_count} probes, residual "
        f"{result.residual:.3e} -> {'recovered' if result.success else 'failed'}"
    )
    out = {
        "dim": key.dim,
        "alpha": key.alpha,
        "probes": args.probes,
        "probe_count": result.probe_count,
        "residual": result.residual,
        "success": result.success,
    }
    if args.keynet:
        kn = load_keynet(args.keynet)
        out["fingerprint_match"] = kn.fingerprint == key.fingerprint
    return out, [], [], 0


def cmd_ssim(args):
    ref = _read_image(args.ref)
    test = _read_image(args.test)
    params = SsimParams(window=args.window, dynamic_range=args.dynamic_range)
    value = ssim(ref, test, params)
    _info(f"ssim = {value:.4f}")
    return {"ssim": value}, [Path(args.ref), Path(args.test)], [], 0


def cmd_demo(args):
    net = tiny_demo()
    image = tiny_demo_image()
    chain = assign_keys(net, args.alpha, args.seed, output_public=args.output_public)
    lowered = lower_network(net)
    kn = build_keynet(lowered, chain)
    encoded = encode_image(image, chain)
    y_keyed = keyed_forward(kn, encoded)
    from .network import plain_forward

    y_plain = plain_forward(lowered, vectorize(image))
    decoded = decode_output(chain, y_keyed)
    report = verify_homomorphism(net, chain, trials=args.trials, tol=args.tol, seed=args.seed)
    outputs = []
    if args.out:
        out = Path(args.out)
        save_keychain(chain, out / "keys")
        save_keynet(kn, out / "keynet")
        save_encoded(encoded, out / "encoded.f64")
        _write_vector(y_keyed, out / "result.f64", fingerprint=kn.fingerprint)
        outputs = [out / "keys", out / "keynet"]
    result = {
        "alpha": args.alpha,
        "seed": args.seed,
        "image": image.ravel().tolist(),
        "encoded": encoded.vec.tolist(),
        "keyed_output": y_keyed.tolist(),
        "decoded_output": decoded.tolist(),
        "plain_output": y_plain.tolist(),
        "verify": report.as_dict(),
    }
    if report.passed:
        _info(f"demo pipeline verified: max rel err {report.max_rel_err:.3e}")
    else:
        _info("demo pipeline FAILED verification")
    return result, [], outputs, 0 if report.passed else 1


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keynet",
        description="Keyed convolutional network inference on optically transformed images.",
    )
    parser.add_argument("--version", action="version", version=f"keynet {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("keygen", help="generate a key and write it to a directory")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gain-lo", type=float, default=0.5)
    p.add_argument("--gain-hi", type=float, default=2.0)
    p.add_argument("--bias", dest="bias", action="store_true", default=True)
    p.add_argument("--no-bias", dest="bias", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encode", help="transform an image with the secret image key")
    p.add_argument("--keys", required=True, help="key chain directory")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode-image", help="recover the raw image from an encoding")
    p.add_argument("--keys", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode_image)

    p = sub.add_parser("build", help="key a model: emit the public keyed network and secret keys")
    p.add_argument("--model", required=True, help="model container directory or flat JSON file")
    p.add_argument("--alpha", type=int, default=2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--output-public", dest="output_public", action="store_true", default=True)
    p.add_argument("--output-private", dest="output_public", action="store_false")
    p.add_argument("--tiled", action="store_true", help="store layers in the tiled format")
    p.add_argument("--tile-size", type=int, default=16)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("infer", help="run keyed inference on an encoded image")
    p.add_argument("--keynet", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decode", help="strip the output key from an inference result")
    p.add_argument("--keys", required=True)
    p.add_argument("--result", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="check keyed inference against the plain network")
    p.add_argument("--model", required=True)
    p.add_argument("--keys", required=True)
    p.add_argument("--keynet", default=None, help="verify this container instead of a fresh build")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="memory statistics of a keyed network")
    p.add_argument("--model", required=True)
    p.add_argument("--keynet", required=True)
    p.add_argument("--tile-size", type=int, default=16)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("simulate", help="run the fiber bundle and sensor noise simulation")
    p.add_argument("--fiber-cfg", required=True)
    p.add_argument("--cmos-cfg", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--mean-mode", action="store_true", help="disable all randomness")
    p.add_argument("--key", default=None, help="key directory to compare the pipeline against")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="chosen-plaintext key recovery")
    p.add_argument("--key", required=True, help="key directory acting as the probe oracle")
    p.add_argument("--keynet", default=None, help="cross-check the key against this container")
    p.add_argument("--probes", choices=["basis", "random"], default="basis")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ssim", help="structural similarity between two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--dynamic-range", type=float, default=1.0)
    p.set_defaults(func=cmd_ssim)

    p = sub.add_parser("demo", help="end-to-end pipeline on the built-in 2x2 example")
    p.add_argument("--alpha", type=int, default=2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", default=None)
    p.add_argument("--output-public", dest="output_public", action="store_true", default=True)
    p.add_argument("--output-private", dest="output_public", action="store_false")
    p.set_defaults(func=cmd_demo)

    return parser


def _manifest(args, inputs, outputs) -> dict:
    params = {
        k: v
        for k, v in sorted(vars(args).items())
        if k != "func" and not callable(v)
    }
    in_hashes = {}
    for p in inputs:
        in_hashes.update(_hash_tree(p))
    out_hashes = {}
    for p in outputs:
        out_hashes.update(_hash_tree(p))
    return {
        "tool": "keynet",
        "version": __version__,
        "subcommand": args.subcommand,
        "params": params,
        "inputs": in_hashes,
        "outputs": out_hashes,
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        result, inputs, outputs, code = args.func(args)
        manifest = _manifest(args, inputs, outputs)
        out_dir = getattr(args, "out", None)
        if out_dir and Path(out_dir).is_dir():
            (Path(out_dir) / "run_manifest.json").write_text(
                json.dumps(manifest, indent=2, sort_keys=True) + "\n"
            )
        print(json.dumps({"result": result, "manifest": manifest}, indent=2, sort_keys=True))
        return code
    except KeynetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
