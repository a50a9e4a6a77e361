"""Keyed construction, the inference homomorphism, and memory audits."""

import numpy as np
import pytest

from keynet.errors import ContractError, ShapeError, WrongSensorError
from keynet.keyed import (
    EncodedImage,
    KeyedLinear,
    KeyedRelu,
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
from keynet.keys import KeyGenConfig, gen_key, key_apply, kspm_bytes
from keynet.network import (
    AvgPool,
    Conv2d,
    Dense,
    NetworkDef,
    Relu,
    SparseAffine,
    lower_network,
    plain_forward,
    vectorize,
)
from keynet.sparse import CooMatrix
from keynet.zoo import tiny_demo, tiny_demo_image

from oracles import dense_matmul


def mixed_net(seed=0):
    """conv -> relu -> avgpool -> dense -> relu -> dense on a 6x6 input."""
    rng = np.random.default_rng(seed)
    return NetworkDef(
        (1, 6, 6),
        [
            Conv2d(1, 2, 3, 3, pad=1, weight=rng.standard_normal((2, 1, 3, 3)) / 3.0,
                   bias=rng.uniform(-0.1, 0.1, 2)),
            Relu(),
            AvgPool(2, 2),
            Dense(18, 8, weight=rng.standard_normal((8, 18)) / 4.0,
                  bias=rng.uniform(-0.1, 0.1, 8)),
            Relu(),
            Dense(8, 4, weight=rng.standard_normal((4, 8)) / 3.0),
        ],
    )


def linear_net(seed=0):
    rng = np.random.default_rng(seed)
    return NetworkDef(
        (1, 4, 4),
        [
            Conv2d(1, 2, 2, 2, stride=2, weight=rng.standard_normal((2, 1, 2, 2)),
                   bias=rng.uniform(-0.5, 0.5, 2)),
            Dense(8, 3, weight=rng.standard_normal((3, 8))),
        ],
    )


def rel_err(a, b):
    return np.abs(a - b).max() / (1.0 + np.abs(b).max())


class TestAssignKeys:
    def test_identity_mode_reduces_to_plain(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=2, seed=0, identity=True)
        lowered = lower_network(net)
        kn = build_keynet(lowered, chain)
        for kstep, pstep in zip(kn.steps, lowered.steps):
            if isinstance(kstep, KeyedLinear):
                assert kstep.aff.matrix == pstep.matrix

    def test_rectifier_boundaries_are_scaled_permutations(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=4, seed=1)
        for i, layer in enumerate(net.layers, start=1):
            if isinstance(layer, Relu):
                key = chain.keys[i]
                assert key.alpha == 1
                assert not key.has_bias

    def test_output_key_identity_iff_public(self):
        net = linear_net()
        pub = assign_keys(net, alpha=2, seed=3, output_public=True)
        assert pub.keys[-1].forward == CooMatrix.identity(4)
        priv = assign_keys(net, alpha=2, seed=3, output_public=False)
        assert priv.keys[-1].forward != CooMatrix.identity(4)
        assert priv.keys[-1].alpha == 2

    def test_deterministic_chain(self):
        net = mixed_net()
        a = assign_keys(net, alpha=4, seed=99)
        b = assign_keys(net, alpha=4, seed=99)
        for ka, kb in zip(a.keys, b.keys):
            assert kspm_bytes(ka.forward) == kspm_bytes(kb.forward)
            assert kspm_bytes(ka.inverse) == kspm_bytes(kb.inverse)

    def test_boundary_dims_match_shapes(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=2, seed=5)
        assert chain.dims == [36, 72, 72, 18, 8, 8, 4]

    def test_alpha_capped_at_tiny_boundary(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=8, seed=5, output_public=False)
        assert chain.keys[-1].alpha == 4  # output boundary has dim 4
        assert chain.keys[0].alpha == 8

    def test_repeated_builds_byte_identical(self):
        net = mixed_net()
        lowered = lower_network(net)
        for _ in range(2):
            chains = [assign_keys(net, alpha=4, seed=123) for _ in range(2)]
        nets = [build_keynet(lowered, c) for c in chains]
        for a, b in zip(nets[0].steps, nets[1].steps):
            assert kspm_bytes(a.aff.matrix) == kspm_bytes(b.aff.matrix)


class TestBuildKeynet:
    def test_identity_chain_bitwise(self):
        net = tiny_demo()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=1, seed=0, identity=True)
        kn = build_keynet(lowered, chain)
        assert kn.steps[0].aff.matrix == lowered.steps[0].matrix

    def test_rectifier_boundary_with_soft_key_rejected(self):
        net = tiny_demo()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=1, output_public=False)
        # Overwrite the rectifier's own key with a soft (alpha=2) key.
        bad = gen_key(KeyGenConfig(dim=2, alpha=2, seed=9))
        chain.keys[2] = bad
        with pytest.raises(ContractError):
            build_keynet(lowered, chain)

    def test_dim_mismatch_rejected(self):
        net = tiny_demo()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=1, seed=0)
        chain.keys[0] = gen_key(KeyGenConfig(dim=7, alpha=1, seed=0))
        with pytest.raises(ShapeError):
            build_keynet(lowered, chain)

    def test_quadratic_bound_exhaustive_single_nonzero(self):
        # All 16 positions of a single-entry 4x4 layer, keyed at alpha=2,
        # against a dense brute-force product.
        a = gen_key(KeyGenConfig(dim=4, alpha=2, seed=11))
        b = gen_key(KeyGenConfig(dim=4, alpha=2, seed=12))
        a_core = a.forward_core.to_dense()
        b_core = b.inverse_core.to_dense()
        for r in range(4):
            for c in range(4):
                w = np.zeros((4, 4))
                w[r, c] = 1.7
                keyed = dense_matmul(dense_matmul(a_core, w), b_core)
                assert np.count_nonzero(keyed) <= 4

    def test_quadratic_bound_on_mixed_net(self):
        net = mixed_net()
        lowered = lower_network(net)
        for alpha in (1, 2, 4):
            chain = assign_keys(net, alpha=alpha, seed=alpha)
            kn = build_keynet(lowered, chain)
            stats = memory_stats(kn, lowered, tile_size=4)
            for layer in stats["layers"]:
                assert layer["ratio"] <= alpha**2 + 1e-12, layer


class TestEncodeDecode:
    def test_identity_key_encode_is_vectorize(self):
        net = tiny_demo()
        chain = assign_keys(net, alpha=1, seed=0, identity=True)
        enc = encode_image(tiny_demo_image(), chain)
        assert np.array_equal(enc.vec, vectorize(tiny_demo_image()))

    def test_encode_decode_round_trip(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=4, seed=8)
        x = np.random.default_rng(0).standard_normal((1, 6, 6))
        enc = encode_image(x, chain)
        back = decode_image(chain, enc)
        np.testing.assert_allclose(back, x, atol=1e-9)

    def test_encoding_hides_structure(self):
        from keynet.analysis import ssim

        # A smooth structured scene; the soft shuffle should destroy it.
        yy, xx = np.mgrid[0:32, 0:32] / 31.0
        img = 0.4 + 0.3 * np.sin(6.0 * xx) * np.cos(4.0 * yy)
        img += 0.3 * np.exp(-((xx - 0.6) ** 2 + (yy - 0.4) ** 2) / 0.02)
        net = NetworkDef((1, 32, 32), [AvgPool(2, 2)])
        chain = assign_keys(net, alpha=8, seed=21)
        enc = encode_image(img[None], chain)
        encoded_img = enc.vec[:-1].reshape(32, 32)
        scale = encoded_img.max() - encoded_img.min()
        normalized = (encoded_img - encoded_img.min()) / scale
        assert ssim(img, normalized) < 0.2

    def test_wrong_image_shape(self):
        chain = assign_keys(tiny_demo(), alpha=1, seed=0)
        with pytest.raises(ShapeError):
            encode_image(np.ones((1, 3, 3)), chain)

    def test_encoded_file_round_trip(self, tmp_path):
        chain = assign_keys(tiny_demo(), alpha=2, seed=4)
        enc = encode_image(tiny_demo_image(), chain)
        save_encoded(enc, tmp_path / "x.f64")
        loaded = load_encoded(tmp_path / "x.f64")
        assert np.array_equal(loaded.vec, enc.vec)
        assert loaded.fingerprint == enc.fingerprint


class TestKeyedForward:
    def test_identity_chain_equals_plain(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=1, seed=0, identity=True)
        kn = build_keynet(lowered, chain)
        x = np.random.default_rng(1).standard_normal((1, 6, 6))
        got = keyed_forward(kn, encode_image(x, chain))
        want = plain_forward(lowered, vectorize(x))
        assert np.array_equal(got, want)

    def test_linear_only_homomorphism(self):
        net = linear_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=17, output_public=False)
        kn = build_keynet(lowered, chain)
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal((1, 4, 4))
            keyed = keyed_forward(kn, encode_image(x, chain))
            ref = key_apply(chain.keys[-1], plain_forward(lowered, vectorize(x)))
            assert rel_err(keyed, ref) <= 1e-9

    @pytest.mark.parametrize("alpha", [1, 2, 4, 8])
    def test_mixed_net_homomorphism(self, alpha):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=alpha, seed=alpha * 7, output_public=False)
        kn = build_keynet(lowered, chain)
        rng = np.random.default_rng(alpha)
        for _ in range(25):
            x = rng.standard_normal((1, 6, 6))
            keyed = keyed_forward(kn, encode_image(x, chain))
            ref = key_apply(chain.keys[-1], plain_forward(lowered, vectorize(x)))
            assert rel_err(keyed, ref) <= 1e-6

    def test_fingerprint_mismatch_rejected(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=1)
        other = assign_keys(net, alpha=2, seed=2)
        kn = build_keynet(lowered, chain)
        enc = encode_image(np.zeros((1, 6, 6)), other)
        with pytest.raises(WrongSensorError):
            keyed_forward(kn, enc)

    def test_public_output_matches_plain_directly(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=4, seed=3, output_public=True)
        kn = build_keynet(lowered, chain)
        x = np.random.default_rng(5).standard_normal((1, 6, 6))
        keyed = keyed_forward(kn, encode_image(x, chain))
        plain = plain_forward(lowered, vectorize(x))
        assert rel_err(keyed, plain) <= 1e-6


class TestDecodeOutput:
    def test_public_key_decode_is_identity(self):
        net = linear_net()
        chain = assign_keys(net, alpha=2, seed=1, output_public=True)
        y = np.array([1.0, -2.0, 3.0, 1.0])
        assert np.array_equal(decode_output(chain, y), y)

    def test_decode_inverts_output_key(self):
        net = linear_net()
        chain = assign_keys(net, alpha=2, seed=2, output_public=False)
        rng = np.random.default_rng(3)
        y = np.concatenate([rng.standard_normal(3), [1.0]])
        np.testing.assert_allclose(
            decode_output(chain, key_apply(chain.keys[-1], y)), y, atol=1e-9
        )

    def test_composed_with_forward_equals_plain(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=4, seed=6, output_public=False)
        kn = build_keynet(lowered, chain)
        x = np.random.default_rng(7).standard_normal((1, 6, 6))
        decoded = decode_output(chain, keyed_forward(kn, encode_image(x, chain)))
        plain = plain_forward(lowered, vectorize(x))
        assert rel_err(decoded, plain) <= 1e-6


class TestVerify:
    def test_identity_chain_zero_error(self):
        net = tiny_demo()
        chain = assign_keys(net, alpha=1, seed=0, identity=True)
        report = verify_homomorphism(net, chain, trials=5, tol=1e-9, seed=0)
        assert report.passed
        assert report.max_rel_err == 0.0

    def test_mixed_net_passes(self):
        net = mixed_net()
        chain = assign_keys(net, alpha=4, seed=9, output_public=False)
        report = verify_homomorphism(net, chain, trials=10, tol=1e-6, seed=1)
        assert report.passed
        assert report.failing_layer is None

    def test_corrupted_layer_localized(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=10)
        kn = build_keynet(lowered, chain)
        target = kn.steps[3].aff
        vals = target.matrix.val.copy()
        vals[0] += 0.5
        corrupted = CooMatrix(
            target.matrix.rows, target.matrix.cols,
            target.matrix.row.copy(), target.matrix.col.copy(), vals,
        )
        kn.steps[3] = KeyedLinear(
            SparseAffine(corrupted, target.in_shape, target.out_shape, target.kind)
        )
        report = verify_homomorphism(net, chain, trials=5, tol=1e-6, seed=2, keyed=kn)
        assert not report.passed
        assert report.failing_layer == 3


class TestMemoryStats:
    def test_identity_chain_ratio_one(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=1, seed=0, identity=True)
        stats = memory_stats(build_keynet(lowered, chain), lowered, tile_size=4)
        for layer in stats["layers"]:
            assert layer["ratio"] == pytest.approx(1.0)

    def test_alpha_one_ratio_at_most_one(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=1, seed=13)
        stats = memory_stats(build_keynet(lowered, chain), lowered, tile_size=4)
        for layer in stats["layers"]:
            assert layer["ratio"] <= 1.0 + 1e-12

    def test_alpha_four_ratio_at_most_sixteen(self):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=4, seed=14, output_public=False)
        stats = memory_stats(build_keynet(lowered, chain), lowered, tile_size=4)
        for layer in stats["layers"]:
            assert layer["ratio"] <= 16.0 + 1e-12


class TestContainers:
    def test_keynet_round_trip(self, tmp_path):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=15)
        kn = build_keynet(lowered, chain)
        save_keynet(kn, tmp_path / "kn")
        loaded = load_keynet(tmp_path / "kn")
        assert loaded.alpha == kn.alpha
        assert loaded.fingerprint == kn.fingerprint
        for a, b in zip(loaded.steps, kn.steps):
            assert type(a) is type(b)
            assert a.aff.matrix == b.aff.matrix
            assert a.aff.in_shape == b.aff.in_shape

    def test_keynet_tiled_round_trip(self, tmp_path):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=16)
        kn = build_keynet(lowered, chain)
        save_keynet(kn, tmp_path / "kn", tiled=True, tile_size=8)
        loaded = load_keynet(tmp_path / "kn")
        for a, b in zip(loaded.steps, kn.steps):
            assert a.aff.matrix == b.aff.matrix

    def test_keynet_container_holds_no_keys(self, tmp_path):
        net = mixed_net()
        lowered = lower_network(net)
        chain = assign_keys(net, alpha=2, seed=17)
        kn = build_keynet(lowered, chain)
        save_keynet(kn, tmp_path / "kn")
        files = sorted(p.name for p in (tmp_path / "kn").iterdir())
        assert files == ["layer000.kspm", "layer001.kspm", "layer002.kspm",
                         "layer003.kspm", "layer004.kspm", "layer005.kspm",
                         "manifest.json"]
        manifest = (tmp_path / "kn" / "manifest.json").read_text()
        assert "boundaries" not in manifest
        # The only key trace is the one-way fingerprint hash.
        assert chain.fingerprint in manifest

    def test_keychain_round_trip(self, tmp_path):
        net = mixed_net()
        chain = assign_keys(net, alpha=4, seed=18, output_public=False)
        save_keychain(chain, tmp_path / "keys")
        loaded = load_keychain(tmp_path / "keys")
        assert loaded.alpha == chain.alpha
        assert loaded.seed == chain.seed
        assert loaded.shapes == chain.shapes
        for a, b in zip(loaded.keys, chain.keys):
            assert a.forward == b.forward
            assert a.inverse == b.inverse

    def test_encoded_image_contract(self):
        with pytest.raises(ContractError):
            EncodedImage(np.array([1.0, 2.0, 0.0]), "fp")
