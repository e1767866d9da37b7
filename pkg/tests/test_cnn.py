import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotmaxcnn.cnn import (
    Architecture,
    ConfigError,
    ConvLayer,
    ConvNet,
    FeedForwardNet,
    classify,
    cnn_branch_forward,
    conv_layer_forward,
    ffn_forward,
    load_weights,
    plug_in_classify,
    rotated_views,
    save_weights,
    truncate,
)
from rotmaxcnn.compiler import build_max_network
from rotmaxcnn.grid import rot90
from rotmaxcnn.training import init_architecture

from conftest import random_ffn


def naive_conv(o, W, b):
    """Six nested loops over (position, channels, taps); input channel outer, then taps."""
    n, lam, _, kin = o.shape
    M, kout = W.shape[0], W.shape[3]
    c = math.ceil(M / 2)
    out = np.zeros((n, lam, lam, kout))
    for a in range(n):
        for i in range(lam):
            for j in range(lam):
                for s2 in range(kout):
                    acc = 0.0
                    for s1 in range(kin):
                        for t1 in range(M):
                            for t2 in range(M):
                                ii, jj = i + t1 + 1 - c, j + t2 + 1 - c
                                if 0 <= ii < lam and 0 <= jj < lam:
                                    acc += W[t1, t2, s1, s2] * o[a, ii, jj, s1]
                    out[a, i, j, s2] = max(acc + b[s2], 0.0)
    return out


def identity_net(B=0):
    return ConvNet([ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))], np.array([1.0]), B)


def random_convnet(rng, k, M, B=0):
    layers, prev = [], 1
    for kr, Mr in zip(k, M):
        layers.append(ConvLayer(rng.normal(size=(Mr, Mr, prev, kr)), rng.normal(0, 0.1, kr)))
        prev = kr
    return ConvNet(layers, rng.normal(size=prev), B)


def random_arch(rng, family, lam=6, t=2):
    arch = init_architecture(family, lam, t, [2, 2], [3, 3], 1, rng, head_depth=1, head_width=3)
    for p in arch.params():
        p += rng.normal(0.0, 0.3, p.shape)
    return arch


class TestConvLayer:
    def test_identity_filter(self, rng):
        x = rng.uniform(size=(2, 5, 5, 1))
        out = conv_layer_forward(x, ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1)))
        np.testing.assert_array_equal(out, x)

    def test_corner_sums_in_range_taps(self):
        # all-ones 3x3 filter on a 4x4 map: a corner sees only its 2x2 neighbourhood
        x = np.arange(1.0, 17.0).reshape(1, 4, 4, 1)
        out = conv_layer_forward(x, ConvLayer(np.ones((3, 3, 1, 1)), np.zeros(1)))[0, :, :, 0]
        assert out[0, 0] == 1 + 2 + 5 + 6
        assert out[3, 3] == 11 + 12 + 15 + 16
        assert out[0, 3] == 3 + 4 + 7 + 8
        assert out[1, 1] == sum(range(1, 4)) + sum(range(5, 8)) + sum(range(9, 12))

    def test_even_filter_offsets(self):
        # M=2 reads offsets {0, +1}: taps t - ceil(M/2) for t = 1, 2
        x = np.arange(1.0, 10.0).reshape(1, 3, 3, 1)
        out = conv_layer_forward(x, ConvLayer(np.ones((2, 2, 1, 1)), np.zeros(1)))[0, :, :, 0]
        np.testing.assert_array_equal(out, [[12, 16, 9], [24, 28, 15], [15, 17, 9]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_matches_naive_reference_exactly(self, lam, M, kin, kout, seed):
        rng = np.random.default_rng(seed)
        o = rng.normal(size=(2, lam, lam, kin))
        W, b = rng.normal(size=(M, M, kin, kout)), rng.normal(size=kout)
        np.testing.assert_array_equal(conv_layer_forward(o, ConvLayer(W, b)), naive_conv(o, W, b))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigError):
            conv_layer_forward(rng.uniform(size=(1, 4, 4, 2)), ConvLayer(np.ones((3, 3, 1, 1)), np.zeros(1)))

    def test_bad_shapes(self):
        with pytest.raises(ConfigError):
            ConvLayer(np.ones((3, 2, 1, 1)), np.zeros(1))
        with pytest.raises(ConfigError):
            ConvLayer(np.ones((3, 3, 1, 2)), np.zeros(1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_size_preserved_and_nonnegative(self, lam, seed):
        rng = np.random.default_rng(seed)
        net = random_convnet(rng, [3, 2, 2], [3, 5, 2])
        for o in net.feature_maps(rng.uniform(size=(2, lam, lam)))[1:]:
            assert o.shape[1:3] == (lam, lam)
            assert (o >= 0).all()


class TestBranch:
    def test_identity_is_max_pixel(self, rng):
        x = rng.uniform(size=(5, 5))
        assert cnn_branch_forward(identity_net(), x) == x.max()

    def test_bound_one_on_3x3_is_centre(self, rng):
        x = rng.uniform(size=(3, 3))
        assert cnn_branch_forward(identity_net(B=1), x) == x[1, 1]

    def test_interior_only(self):
        x = np.zeros((5, 5))
        x[0, 0] = 9.0
        x[2, 3] = 1.0
        assert cnn_branch_forward(identity_net(B=1), x) == 1.0

    def test_bound_too_large(self, rng):
        with pytest.raises(ConfigError):
            cnn_branch_forward(identity_net(B=2), rng.uniform(size=(4, 4)))

    def test_batch_agrees_with_single(self, rng):
        net = random_convnet(rng, [2, 3], [3, 3], B=1)
        x = rng.uniform(size=(4, 6, 6))
        np.testing.assert_array_equal(net(x), [net(xi) for xi in x])

    def test_channel_chain_checked(self, rng):
        with pytest.raises(ConfigError):
            ConvNet([ConvLayer(np.ones((3, 3, 1, 2)), np.zeros(2)), ConvLayer(np.ones((3, 3, 3, 1)), np.zeros(1))],
                    np.ones(1))


class TestFeedForward:
    def test_affine_when_no_hidden(self):
        net = FeedForwardNet([], np.array([2.0, -1.0]), 0.5)
        assert ffn_forward(net, np.array([3.0, 4.0])) == 2.5

    def test_zero_weights_give_bias(self, rng):
        net = FeedForwardNet([(np.zeros((3, 2)), np.zeros(3))], np.zeros(3), -0.25)
        assert net(rng.normal(size=2)) == -0.25

    def test_matches_manual(self, rng):
        net = random_ffn(rng, 3, width=4, depth=2)
        v = rng.normal(size=3)
        h = v
        for W, b in net.hidden:
            h = np.maximum(W @ h + b, 0)
        assert net(v) == pytest.approx(float(net.out_w @ h + net.out_b), abs=1e-14)

    def test_max_network(self, rng):
        net = build_max_network(5)
        V = rng.integers(-2**20, 2**20, size=(200, 5)) / 2**10
        np.testing.assert_array_equal(net(V), V.max(axis=1))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ConfigError):
            random_ffn(rng, 3)(np.ones(2))


class TestArchitectures:
    def test_f2_with_one_branch(self, rng):
        arch = random_arch(rng, "F2", t=1)
        x = rng.uniform(size=(3, 6, 6))
        np.testing.assert_array_equal(arch(x), arch.branches[0](x))

    def test_f1_with_max_head_equals_f2(self, rng):
        for t in (1, 2, 3, 5):
            f2 = random_arch(rng, "F2", t=t)
            f1 = Architecture("F1", f2.lam, f2.branches, t, build_max_network(t))
            x = rng.uniform(size=(20, 6, 6))
            # (b - a) + a rounds on arbitrary floats, so allow a few ulp
            np.testing.assert_allclose(f1(x), f2(x), rtol=1e-15, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(3, 9), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_f3_quarter_turn_invariance(self, lam, t, seed):
        rng = np.random.default_rng(seed)
        arch = random_arch(rng, "F3", lam=lam, t=t)
        x = rng.uniform(size=(10, lam, lam))
        np.testing.assert_array_equal(arch(x), arch(rot90(x)))

    def test_f3_is_max_over_orbit_of_f2(self, rng):
        arch = random_arch(rng, "F3", t=2)
        f2 = Architecture("F2", arch.lam, arch.branches, 2)
        x = rng.uniform(size=(5, 6, 6))
        orbit = np.stack([f2(rot90(x, k)) for k in range(4)])
        np.testing.assert_array_equal(arch(x), orbit.max(axis=0))

    def test_f3_shares_weights(self, rng):
        arch = random_arch(rng, "F3", t=2)
        assert len(arch.branches) == 2
        assert len(arch.params()) == 2 * len(arch.branches[0].params())

    def test_f2_branch_permutation(self, rng):
        arch = random_arch(rng, "F2", t=4)
        perm = Architecture("F2", arch.lam, arch.branches[::-1], 4)
        x = rng.uniform(size=(10, 6, 6))
        np.testing.assert_array_equal(arch(x), perm(x))

    def test_f4_is_max_over_rotated_views(self, rng):
        arch = random_arch(rng, "F4", lam=5, t=4)
        x = rng.uniform(size=(3, 5, 5))
        views = rotated_views(x, 4)
        assert views.shape == (4, 3, 9, 9)
        expected = np.max([arch.branches[0](v) for v in views], axis=0)
        np.testing.assert_array_equal(arch(x), expected)

    def test_f4_branch_resolution(self, rng):
        arch = random_arch(rng, "F4", lam=28, t=2)
        assert arch.branch_resolution == 40

    def test_resolution_mismatch(self, rng):
        arch = random_arch(rng, "F2")
        with pytest.raises(ConfigError):
            arch(rng.uniform(size=(1, 7, 7)))

    def test_family_checks(self, rng):
        b = [identity_net(), identity_net()]
        with pytest.raises(ConfigError):
            Architecture("F5", 4, b, 2)
        with pytest.raises(ConfigError):
            Architecture("F1", 4, b, 2)
        with pytest.raises(ConfigError):
            Architecture("F2", 4, b, 3)
        with pytest.raises(ConfigError):
            Architecture("F4", 4, b, 2)
        with pytest.raises(ConfigError):
            Architecture("F2", 4, b, 2, build_max_network(2))

    def test_classify(self, rng):
        arch = random_arch(rng, "F2", t=2)
        x = rng.uniform(size=(8, 6, 6))
        np.testing.assert_array_equal(classify(arch, x), (arch(x) >= 0.5).astype(int))


class TestTruncateAndPlugIn:
    @pytest.mark.parametrize("z,expected", [(3, 2), (-5, -2), (1, 1)])
    def test_truncate(self, z, expected):
        assert truncate(2, z) == expected

    def test_truncate_needs_positive_beta(self):
        with pytest.raises(ValueError):
            truncate(0, 1.0)

    @pytest.mark.parametrize("v,c", [(0.6, 1), (0.5, 1), (0.49, 0)])
    def test_plug_in(self, v, c):
        assert plug_in_classify(v) == c


class TestWeightFiles:
    @pytest.mark.parametrize("family", ["F1", "F2", "F3", "F4"])
    def test_round_trip_bit_exact(self, rng, tmp_path, family):
        arch = random_arch(rng, family, t=3)
        path = tmp_path / "w.json"
        save_weights(arch, path)
        back = load_weights(path)
        assert back.family == family and back.t == 3 and back.lam == arch.lam
        for p, q in zip(arch.params(), back.params()):
            assert p.shape == q.shape
            np.testing.assert_array_equal(p, q)
        x = rng.uniform(size=(4, arch.lam, arch.lam))
        np.testing.assert_array_equal(arch(x), back(x))

    def test_rejects_other_formats(self, tmp_path):
        path = tmp_path / "w.json"
        path.write_text('{"format": "something"}')
        with pytest.raises(ConfigError):
            load_weights(path)
