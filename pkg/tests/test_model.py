import numpy as np
import pytest

from sadunet.audio import MagPhase
from sadunet.layers import concat_channels, conv2d, conv2d_transpose, maxpool2x2
from sadunet.model import (
    ModelConfig,
    apply_masks,
    attention_subnet_forward,
    cast_params,
    dense_block_forward,
    describe,
    init_params,
    pad_magnitude,
    param_shapes,
    parameter_count,
    predict_masks,
    unet_forward,
)
from sadunet.gradsuite import SHIFT_INVARIANT
from sadunet.tensor import Tensor, backward, elu, grad_check, l1, mul, precision, relu, sum_all

from oracles import attn_params, loop_attention

TINY = dict(channels=4, layers=2, levels=2, freq_bins=16, window_frames=8)


class TestConfig:
    def test_level_extents(self):
        cfg = ModelConfig()
        assert cfg.freq_pad == 528
        assert [cfg.level_shape(d)[0] for d in range(5)] == [528, 264, 132, 66, 33]
        assert cfg.time_pad == 1264 and cfg.window_frames == 1250
        assert cfg.attn_blocks == tuple(range(2, 9))

    def test_plain_default_window(self):
        assert ModelConfig(attention=False).window_frames == 128

    def test_block1_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(attn_blocks=(1, 2))

    def test_dict_roundtrip(self):
        cfg = ModelConfig(**TINY, attn_blocks=(3,))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestDenseBlock:
    def test_zero_weights(self):
        params = {"block1.layer1.weight": Tensor(np.zeros((3, 1, 3, 3))), "block1.layer1.bias": Tensor(np.zeros(3))}
        out = dense_block_forward(Tensor(np.random.default_rng(0).standard_normal((1, 4, 4))), params, 1, 1)
        assert out.shape == (3, 4, 4) and not out.data.any()

    def test_two_layer_composition(self):
        rng = np.random.default_rng(1)
        with precision(np.float64):
            x = Tensor(rng.standard_normal((2, 4, 4)))
            p = {
                "block1.layer1.weight": Tensor(rng.standard_normal((2, 2, 3, 3))),
                "block1.layer1.bias": Tensor(rng.standard_normal(2)),
                "block1.layer2.weight": Tensor(rng.standard_normal((2, 4, 3, 3))),
                "block1.layer2.bias": Tensor(rng.standard_normal(2)),
            }
            x1 = elu(conv2d(x, p["block1.layer1.weight"], p["block1.layer1.bias"]))
            x2 = elu(conv2d(concat_channels(x1, x), p["block1.layer2.weight"], p["block1.layer2.bias"]))
            out = dense_block_forward(x, p, 1, 2)
        np.testing.assert_array_equal(out.data, x2.data)

    @pytest.mark.parametrize("cin", [4, 8])
    def test_output_channels(self, cin):
        cfg = ModelConfig(**TINY)
        rng = np.random.default_rng(0)
        p = {"block9.layer1.weight": Tensor(rng.standard_normal((4, cin, 3, 3))), "block9.layer1.bias": Tensor(np.zeros(4)),
             "block9.layer2.weight": Tensor(rng.standard_normal((4, cin + 4, 3, 3))), "block9.layer2.bias": Tensor(np.zeros(4))}
        out = dense_block_forward(Tensor(rng.standard_normal((cin, 4, 4))), p, 9, 2)
        assert out.shape[0] == cfg.channels


class TestAttention:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            x = rng.standard_normal((2, 4, 3))
            p = attn_params(rng, C=2, Ca=1, E=2, F=4, scale=0.5)
            maps = {}
            out = attention_subnet_forward(Tensor(x), p, "a", maps)
        expected, beta = loop_attention(x, p)
        assert out.shape == (4, 4, 3)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)
        np.testing.assert_allclose(maps["a"], beta, atol=1e-5)

    def test_zero_query_key_gives_uniform(self):
        rng = np.random.default_rng(1)
        with precision(np.float64):
            p = attn_params(rng, C=3, Ca=2, E=4, F=5)
            for k in ("a.query.weight", "a.query.bias", "a.key.weight", "a.key.bias"):
                p[k] = Tensor(np.zeros(p[k].shape))
            x = Tensor(rng.standard_normal((3, 5, 6)))
            maps = {}
            out = attention_subnet_forward(x, p, "a", maps)
            v = conv2d(x, p["a.value_conv.weight"], p["a.value_conv.bias"]).data
        np.testing.assert_allclose(maps["a"], 1 / 6, atol=1e-12)
        np.testing.assert_allclose(out.data[3:], np.repeat(v.mean(axis=2, keepdims=True), 6, axis=2), atol=1e-12)

    def test_single_segment(self):
        rng = np.random.default_rng(2)
        with precision(np.float64):
            p = attn_params(rng, C=2, Ca=1, E=3, F=4)
            x = Tensor(rng.standard_normal((2, 4, 1)))
            maps = {}
            out = attention_subnet_forward(x, p, "a", maps)
            v = conv2d(x, p["a.value_conv.weight"], p["a.value_conv.bias"])
        np.testing.assert_array_equal(maps["a"], [[1.0]])
        np.testing.assert_allclose(out.data, concat_channels(x, v).data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_row_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        p = attn_params(rng, C=4, Ca=2, E=5, F=8)
        maps = {}
        attention_subnet_forward(Tensor(rng.standard_normal((4, 8, 16))), p, "a", maps)
        b = maps["a"]
        np.testing.assert_allclose(b.sum(axis=1), 1, atol=1e-6)
        assert np.all(b >= 0) and np.all(b <= 1)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        with precision(np.float64):
            p = attn_params(rng, C=2, Ca=2, E=3, F=4, scale=0.4)
            x = rng.standard_normal((2, 4, 7))
            perm = rng.permutation(7)
            m1, m2 = {}, {}
            o1 = attention_subnet_forward(Tensor(x), p, "a", m1).data
            o2 = attention_subnet_forward(Tensor(x[:, :, perm]), p, "a", m2).data
        np.testing.assert_allclose(o2, o1[:, :, perm], atol=1e-12)
        np.testing.assert_allclose(m2["a"], m1["a"][np.ix_(perm, perm)], atol=1e-12)

    def test_identity_attention_returns_value(self):
        C, F, T = 2, 4, 3
        with precision(np.float64):
            x = np.zeros((C, F, T))
            x[0, np.arange(T), np.arange(T)] = 1.0
            x[1] = np.random.default_rng(4).standard_normal((F, T))
            p = attn_params(np.random.default_rng(5), C=C, Ca=1, E=F, F=F)
            for kind in ("query", "key"):
                w = np.zeros((1, C, 1, 1))
                w[0, 0] = 1.0
                p[f"a.{kind}_conv.weight"] = Tensor(w)
                p[f"a.{kind}_conv.bias"] = Tensor(np.zeros(1))
                p[f"a.{kind}.weight"] = Tensor(100 * np.eye(F))
                p[f"a.{kind}.bias"] = Tensor(np.zeros(F))
            maps = {}
            out = attention_subnet_forward(Tensor(x), p, "a", maps)
            v = conv2d(Tensor(x), p["a.value_conv.weight"], p["a.value_conv.bias"]).data
        np.testing.assert_array_equal(maps["a"], np.eye(T))
        np.testing.assert_array_equal(out.data[C:], v)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(600 + seed)
        with precision(np.float64):
            p = attn_params(rng, C=2, Ca=1, E=2, F=4, scale=0.5)
            x = Tensor(rng.standard_normal((2, 4, 3)))
            probe = Tensor(rng.standard_normal((4, 4, 3)))
            names = [k for k in p if not k.endswith(SHIFT_INVARIANT)]

            def f(x, *ws):
                q = {**p, **dict(zip(names, ws))}
                return sum_all(mul(attention_subnet_forward(x, q, "a"), probe))

            err = grad_check(f, [x, *(p[k] for k in names)])
        assert err < 1e-4

    def test_key_biases_have_zero_gradient(self):
        # a per-row constant added to the scores cancels in the softmax
        rng = np.random.default_rng(9)
        with precision(np.float64):
            p = attn_params(rng, C=2, Ca=1, E=2, F=4, scale=0.5)
            for t in p.values():
                t.requires_grad = True
            x = Tensor(rng.standard_normal((2, 4, 3)))
            backward(l1(attention_subnet_forward(x, p, "a")))
        for k in p:
            if k.endswith(SHIFT_INVARIANT):
                assert np.max(np.abs(p[k].grad)) < 1e-12
            elif k.endswith("weight"):
                assert np.max(np.abs(p[k].grad)) > 1e-6


def composed_tiny_forward(mag, p, cfg):
    """Hand-unrolled two-level network, written independently of unet_forward."""

    def block(h, b):
        x1 = elu(conv2d(h, p[f"block{b}.layer1.weight"], p[f"block{b}.layer1.bias"]))
        return elu(conv2d(concat_channels(x1, h), p[f"block{b}.layer2.weight"], p[f"block{b}.layer2.bias"]))

    def att(h, b):
        return attention_subnet_forward(h, p, f"attn{b}") if b in cfg.active_attn_blocks else h

    e1 = block(mag, 1)
    e2 = block(maxpool2x2(att(e1, 1)), 2)
    bott = block(maxpool2x2(att(e2, 2)), 3)
    d1 = block(concat_channels(conv2d_transpose(att(bott, 3), p["up1.weight"], p["up1.bias"]), e2), 4)
    d2 = block(concat_channels(conv2d_transpose(att(d1, 4), p["up2.weight"], p["up2.bias"]), e1), 5)
    h = elu(conv2d(att(d2, 5), p["reorg.weight"], p["reorg.bias"]))
    m1 = relu(conv2d(h, p["out_voice.weight"], p["out_voice.bias"])).data[0]
    m2 = relu(conv2d(h, p["out_accomp.weight"], p["out_accomp.bias"])).data[0]
    return m1[:cfg.freq_bins, :cfg.window_frames], m2[:cfg.freq_bins, :cfg.window_frames]


class TestUnet:
    @pytest.mark.parametrize("attention", [True, False])
    def test_matches_composition(self, attention):
        cfg = ModelConfig(**TINY, attention=attention)
        with precision(np.float64):
            p = init_params(cfg, seed=3)
            for k in p:
                if k.endswith(".bias"):
                    p[k] = Tensor(np.random.default_rng(len(k)).standard_normal(p[k].shape) * 0.1)
            mag = np.random.default_rng(0).uniform(0, 2, (16, 8))
            x = pad_magnitude(mag, cfg)
            m1, m2 = unet_forward(x, p, cfg)
            o1, o2 = composed_tiny_forward(x, p, cfg)
        np.testing.assert_allclose(m1.data, o1, atol=1e-12)
        np.testing.assert_allclose(m2.data, o2, atol=1e-12)

    def test_zero_input_masks(self):
        cfg = ModelConfig(channels=4, layers=2, levels=2, window_frames=12)
        p = init_params(cfg, seed=0)
        m1, m2 = predict_masks(np.zeros((513, 12)), p, cfg)
        assert m1.shape == m2.shape == (513, 12)
        assert np.all(m1 >= 0) and np.all(m2 >= 0)

    def test_padding_shapes_all_levels(self):
        for levels in (1, 2, 3, 4):
            cfg = ModelConfig(channels=2, layers=1, levels=levels, attn_channels=1, embed_dim=2,
                              freq_bins=37, window_frames=21)
            m1, _ = unet_forward(pad_magnitude(np.ones((37, 21)), cfg), init_params(cfg, 0), cfg)
            assert m1.shape == (37, 21)

    def test_attention_disabled_equals_empty_attention_set(self):
        plain = ModelConfig(**TINY, attention=False)
        empty = ModelConfig(**TINY, attn_blocks=())
        assert param_shapes(plain) == param_shapes(empty)
        p = init_params(plain, seed=1)
        mag = pad_magnitude(np.random.default_rng(1).uniform(0, 1, (16, 8)), plain)
        a = unet_forward(mag, p, plain)
        b = unet_forward(mag, p, empty)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_plain_params_shared_names(self):
        plain = dict(param_shapes(ModelConfig(**TINY, attention=False)))
        attn = dict(param_shapes(ModelConfig(**TINY)))
        assert set(plain) <= set(attn)
        # only layers fed by a post-attention map change shape
        changed = {k for k in plain if plain[k] != attn[k]}
        assert changed and all(k.startswith(("block3.layer", "up", "reorg")) for k in changed)

    def test_end_to_end_gradcheck(self):
        cfg = ModelConfig(**TINY)
        rng = np.random.default_rng(0)
        with precision(np.float64):
            p = cast_params(init_params(cfg, seed=7), np.float64)
            mag = pad_magnitude(rng.uniform(0.1, 2.0, (16, 8)), cfg)
            target = Tensor(rng.uniform(0, 1, (16, 8)))
            names = [k for k in p if not k.endswith(SHIFT_INVARIANT)]

            def f(*ws):
                q = {**p, **dict(zip(names, ws))}
                m1, m2 = unet_forward(mag, q, cfg)
                return sum_all(mul(m1, target)) + sum_all(mul(m2, m2))

            err = grad_check(f, [p[k] for k in names], coords=12, rng=np.random.default_rng(1))
        assert err < 1e-3

    def test_every_param_reachable(self):
        cfg = ModelConfig(**TINY)
        p = init_params(cfg, seed=2)
        for t in p.values():
            t.grad = None
        m1, m2 = unet_forward(pad_magnitude(np.ones((16, 8)), cfg), p, cfg)
        backward(l1(m1) + l1(m2))
        assert all(t.grad is not None for t in p.values())


def closed_form_count(C, K, L, Ca, E, F_pad, attn):
    """Shape-sum oracle for the default topology."""
    def dense(cin):
        return sum(C * (cin + (l - 1) * C) * 9 + C for l in range(1, K + 1))

    mult = lambda b: 2 if b in attn else 1  # noqa: E731
    total = dense(1)
    for b in range(2, L + 2):
        total += dense(C * mult(b - 1))
    for j in range(1, L + 1):
        b = L + 1 + j
        total += C * mult(b - 1) * C * 4 + C  # transpose conv
        total += dense(2 * C)
    for b in attn:
        depth = b - 1 if b <= L + 1 else 2 * L + 1 - b
        F = F_pad >> depth
        total += 2 * (Ca * C + Ca) + (C * C + C) + 2 * (E * Ca * F + E)
    total += C * C * mult(2 * L + 1) + C + 2 * (C + 1)
    return total


class TestInit:
    def test_determinism(self):
        cfg = ModelConfig(**TINY)
        a, b = init_params(cfg, 5), init_params(cfg, 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert not np.array_equal(init_params(cfg, 6)["block1.layer1.weight"].data, a["block1.layer1.weight"].data)

    def test_default_count(self):
        cfg = ModelConfig()
        expected = closed_form_count(32, 4, 4, 5, 20, 528, set(range(2, 9)))
        assert parameter_count(cfg) == expected
        assert f"total parameters: {expected}" in describe(cfg)
        plain = ModelConfig(attention=False)
        assert parameter_count(plain) == closed_form_count(32, 4, 4, 5, 20, 528, set())

    def test_weights_bounded(self):
        p = init_params(ModelConfig(), seed=0)
        assert max(np.abs(t.data).max() for t in p.values()) < 1
        assert all(not t.data.any() for k, t in p.items() if k.endswith(".bias"))


class TestApplyMasks:
    def mixture(self, rng, shape=(513, 10)):
        return MagPhase(rng.uniform(0, 2, shape), rng.uniform(-np.pi, np.pi, shape))

    def test_identity_and_zero(self):
        mix = self.mixture(np.random.default_rng(0))
        one, zero = apply_masks((np.ones((513, 10)), np.zeros((513, 10))), mix)
        np.testing.assert_array_equal(one.magnitude, mix.magnitude)
        np.testing.assert_array_equal(one.phase, mix.phase)
        assert not zero.magnitude.any()

    def test_oracle_masks(self):
        rng = np.random.default_rng(1)
        x1 = rng.standard_normal((513, 10)) + 1j * rng.standard_normal((513, 10))
        x2 = rng.standard_normal((513, 10)) + 1j * rng.standard_normal((513, 10))
        y = x1 + x2
        mix = MagPhase(np.abs(y), np.angle(y))
        masks = [np.abs(x) / (np.abs(y) + 1e-8) for x in (x1, x2)]
        for est, ref in zip(apply_masks(masks, mix), (x1, x2)):
            ok = np.abs(y) > 1e-3
            assert np.max(np.abs(est.magnitude - np.abs(ref))[ok]) < 1e-4

    def test_shape_mismatch(self):
        from sadunet.tensor import ShapeError

        with pytest.raises(ShapeError):
            apply_masks((np.ones((3, 3)), np.ones((3, 3))), self.mixture(np.random.default_rng(0)))
