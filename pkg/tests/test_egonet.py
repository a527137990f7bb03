import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egofilter.egonet import (
    AdamState,
    BadMagicError,
    ChecksumError,
    EgoNetConfig,
    EgoNetWeights,
    InconsistentShapeError,
    NonFiniteGradientError,
    ReceptiveFieldError,
    TruncatedError,
    VersionMismatchError,
    adam_step,
    forward,
    forward_compressed,
    gradient,
    init_weights,
    load_weights,
    loss_and_gradient,
    param_count,
    param_count_closed_form,
    power_law_loss,
    save_weights,
    train,
)
from egofilter.egonet.conv import conv2d, conv2d_backward, conv_transpose2d
from egofilter.egonet.serialization import from_bytes, to_bytes

SMALL = dict(channels=4, dilations=[2, 4])


def brute_conv(x, w, b, dilation=(1, 1), pad=(0, 0)):
    """Direct 6-loop cross-correlation oracle."""
    kh, kw, ci, co = w.shape
    xp = np.pad(x, ((pad[0], pad[0]), (pad[1], pad[1]), (0, 0)))
    ho = xp.shape[0] - dilation[0] * (kh - 1)
    wo = xp.shape[1] - dilation[1] * (kw - 1)
    out = np.zeros((ho, wo, co))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    out[i, j] += xp[i + u * dilation[0], j + v * dilation[1]] @ w[u, v]
    return out + b


def brute_conv_transpose(x, w, b, pad):
    """Scatter definition of a stride-1 transposed convolution, then crop ``pad``."""
    kh, kw, ci, co = w.shape
    h, wd = x.shape[:2]
    full = np.zeros((h + kh - 1, wd + kw - 1, co))
    for i in range(h):
        for j in range(wd):
            for u in range(kh):
                for v in range(kw):
                    full[i + u, j + v] += x[i, j] @ w[u, v]
    return full[pad[0] : pad[0] + h, pad[1] : pad[1] + wd] + b


class TestConv:
    @pytest.mark.parametrize("dilation,pad", [((1, 1), (0, 0)), ((1, 2), (2, 4)), ((1, 4), (2, 8)), ((2, 1), (1, 1))])
    def test_matches_brute_force(self, dilation, pad):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(9, 23, 3))
        w = rng.normal(size=(5, 5, 3, 2))
        b = rng.normal(size=2)
        np.testing.assert_allclose(conv2d(x, w, b, dilation, pad), brute_conv(x, w, b, dilation, pad), atol=1e-10)

    def test_tiled_path(self, monkeypatch):
        import egofilter.egonet.conv as conv

        rng = np.random.default_rng(1)
        x = rng.normal(size=(13, 11, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        ref = brute_conv(x, w, 0.0, (1, 1), (1, 1))
        monkeypatch.setattr(conv, "TILE_PIXELS", 20)
        np.testing.assert_allclose(conv.conv2d(x, w, np.zeros(2), pad=(1, 1)), ref, atol=1e-10)

    def test_transpose_matches_scatter(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(7, 9, 3))
        w = rng.normal(size=(5, 5, 3, 1))
        b = rng.normal(size=1)
        np.testing.assert_allclose(conv_transpose2d(x, w, b, pad=(2, 2)), brute_conv_transpose(x, w, b, (2, 2)),
                                   atol=1e-10)

    def test_backward_by_adjoint(self):
        # <conv(x), g> = <x, conv^T(g)> and the weight gradient is linear in x
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 12, 3))
        w = rng.normal(size=(5, 5, 3, 4))
        g = rng.normal(size=(8, 12, 4))
        y = conv2d(x, w, np.zeros(4), (1, 2), (2, 4))
        gx, gw, gb = conv2d_backward(x, w, g, (1, 2), (2, 4))
        assert np.sum(y * g) == pytest.approx(np.sum(x * gx), rel=1e-10)
        assert np.sum(y * g) == pytest.approx(np.sum(w * gw), rel=1e-10)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 1)))


class TestConfigAndParams:
    def test_default_counts(self):
        assert param_count(init_weights(EgoNetConfig())) == 432_769
        assert param_count(init_weights(EgoNetConfig(convs_share_weights_across_blocks=False))) == 842_497

    def test_small_closed_form(self):
        cfg = EgoNetConfig(channels=4)
        expected = 5 * 5 * 1 * 4 + 4 + 5 * 5 * 4 * 4 + 4 + 1 * 4 * 4 + 4 + 5 * 5 * 4 * 1 + 1
        assert param_count(init_weights(cfg)) == expected == param_count_closed_form(cfg)

    @given(c=st.integers(1, 16), k=st.sampled_from([3, 5, 7]), shared=st.booleans())
    def test_closed_form_any_config(self, c, k, shared):
        cfg = EgoNetConfig(channels=c, kernel=k, convs_share_weights_across_blocks=shared)
        assert sum(int(np.prod(s)) for s in cfg.tensor_shapes().values()) == param_count_closed_form(cfg)

    @pytest.mark.parametrize("kwargs", [dict(channels=0), dict(kernel=4), dict(dilations=[]), dict(dilations=[4, 2])])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            EgoNetConfig(**kwargs)

    def test_init_deterministic(self):
        a, b = init_weights(EgoNetConfig(**SMALL), 3), init_weights(EgoNetConfig(**SMALL), 3)
        c = init_weights(EgoNetConfig(**SMALL), 4)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        assert not np.array_equal(a.tensors["encoder.weight"], c.tensors["encoder.weight"])

    def test_init_bounds(self):
        w = init_weights(EgoNetConfig(channels=8), 0)
        bound = np.sqrt(1 / (5 * 5 * 8))
        assert np.abs(w.tensors["dilation.weight"]).max() <= bound
        assert not w.tensors["skip.bias"].any()


class TestForward:
    def test_shape_default_config_input(self):
        w = init_weights(EgoNetConfig(channels=4))
        x = np.random.default_rng(0).uniform(0, 2, (201, 98))
        assert forward(w, x).shape == (201, 98)

    def test_zero_weights_give_half(self):
        w = init_weights(EgoNetConfig(**SMALL))
        zeros = EgoNetWeights(w.config, {k: np.zeros_like(v) for k, v in w.tensors.items()})
        y = forward_compressed(zeros, np.random.default_rng(1).uniform(0, 1, (16, 24)))
        assert np.all(y == 0.5)

    @settings(max_examples=15, deadline=None)
    @given(f=st.integers(5, 30), t=st.integers(20, 40), seed=st.integers(0, 1000))
    def test_shape_and_range(self, f, t, seed):
        w = init_weights(EgoNetConfig(**SMALL), seed)
        x = np.random.default_rng(seed).uniform(0, 3, (f, t))
        y = forward_compressed(w, x)
        assert y.shape == (f, t)
        assert np.all((y > 0) & (y < 1))

    def test_receptive_field_error_names_minimum(self):
        w = init_weights(EgoNetConfig(channels=2))
        with pytest.raises(ReceptiveFieldError, match="T=80"):
            forward(w, np.ones((201, 79)))

    def test_expand_inverts_compress(self):
        cfg = EgoNetConfig(**SMALL, magnitude_scale=2.0)
        w = init_weights(cfg, dtype=np.float64)
        y = forward_compressed(w, np.ones((16, 24)))
        np.testing.assert_allclose(forward(w, np.ones((16, 24))), (y * 2.0) ** (1 / 0.3), rtol=1e-12)

    def test_zero_input_defined(self):
        w = init_weights(EgoNetConfig(**SMALL))
        assert np.all(np.isfinite(forward(w, np.zeros((16, 24)))))


class TestLoss:
    def test_identity_and_unit(self):
        x = np.random.default_rng(0).uniform(0, 1, (4, 5))
        assert power_law_loss(x, x) == 0.0
        assert power_law_loss(np.ones((1, 1)), np.zeros((1, 1))) == 1.0

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 2, (6, 7)), rng.uniform(0, 2, (6, 7))
        total = 0.0
        for i in range(6):
            for j in range(7):
                total += (a[i, j] ** 0.3 - b[i, j] ** 0.3) ** 2
        assert power_law_loss(a, b) == pytest.approx(total / 42, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            power_law_loss(np.ones((2, 2)), np.ones((2, 3)))


def _f64(cfg, seed, bias_range=None):
    w = init_weights(cfg, seed, dtype=np.float64)
    if bias_range is not None:
        rng = np.random.default_rng(seed + 100)
        for k, v in w.tensors.items():
            if k.endswith(".bias"):
                w.tensors[k] = rng.uniform(*bias_range, size=v.shape)
    return w


class TestGradient:
    def test_matches_finite_differences_small_step(self):
        # zero biases leave many units near their ReLU kink; a small step keeps FD valid
        cfg = EgoNetConfig(channels=3, dilations=[2, 4])
        # nonzero biases keep pre-activations off the ReLU kink at exactly 0
        w = _f64(cfg, 5, bias_range=(-0.2, 0.2))
        rng = np.random.default_rng(6)
        x, t = rng.uniform(0, 1, (12, 20)), rng.uniform(0, 1, (12, 20))
        g = gradient(w, x, t)
        for name in g:
            idx = tuple(rng.integers(0, s) for s in g[name].shape)
            plus, minus = w.copy(), w.copy()
            plus.tensors[name][idx] += 1e-6
            minus.tensors[name][idx] -= 1e-6
            fd = (loss_and_gradient(plus, x, t)[0] - loss_and_gradient(minus, x, t)[0]) / 2e-6
            assert g[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_zero_at_minimum(self):
        cfg = EgoNetConfig(**SMALL, magnitude_scale=1.0)
        w = _f64(cfg, 1)
        x = np.random.default_rng(2).uniform(0, 1, (16, 24))
        target = forward(w, x)
        for g in gradient(w, x, target).values():
            assert np.max(np.abs(g)) < 1e-12

    def test_duplicated_pair_doubles_gradient(self):
        # accumulating the same pair twice, as a minibatch does, doubles every entry
        cfg = EgoNetConfig(channels=2, dilations=[2], kernel=3)
        w = _f64(cfg, 3)
        rng = np.random.default_rng(4)
        x, t = rng.uniform(0, 1, (8, 12)), rng.uniform(0, 1, (8, 12))
        g1 = gradient(w, x, t)
        g2 = gradient(w, x, t)
        for k in g1:
            np.testing.assert_array_equal(g1[k] + g2[k], 2 * g1[k])


class TestAdam:
    def test_first_step_closed_form(self):
        p, s = adam_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
        assert p["w"][0] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)
        assert s.step == 1

    def test_zero_gradient(self):
        p, s = adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamState())
        assert p["w"][0] == 2.0 and s.step == 1

    def test_quadratic(self):
        w, s = {"w": np.array([0.0])}, AdamState()
        for _ in range(200):
            w, s = adam_step(w, {"w": 2 * (w["w"] - 3)}, s, lr=0.1)
        assert abs(w["w"][0] - 3) < 0.1

    def test_non_finite_rejected(self):
        params = {"w": np.array([1.0])}
        with pytest.raises(NonFiniteGradientError):
            adam_step(params, {"w": np.array([np.nan])}, AdamState())
        assert params["w"][0] == 1.0

    def test_inputs_not_mutated(self):
        params = {"w": np.array([1.0, 2.0])}
        adam_step(params, {"w": np.array([1.0, 1.0])}, AdamState())
        assert params["w"].tolist() == [1.0, 2.0]


class TestSerialization:
    def _weights(self):
        return init_weights(EgoNetConfig(**SMALL, magnitude_scale=1.7), 2)

    def test_roundtrip_bit_exact(self, tmp_path):
        w = self._weights()
        save_weights(w, tmp_path / "w.egof")
        back = load_weights(tmp_path / "w.egof")
        assert back.config.to_dict() == w.config.to_dict()
        for k in w.tensors:
            assert back.tensors[k].tobytes() == w.tensors[k].tobytes()

    def test_bad_magic(self):
        data = bytearray(to_bytes(self._weights()))
        data[:4] = b"NOPE"
        with pytest.raises(BadMagicError, match="bad magic"):
            from_bytes(bytes(data))

    def test_truncated(self):
        data = to_bytes(self._weights())
        with pytest.raises(TruncatedError, match="truncated"):
            from_bytes(data[: len(data) // 2])

    def test_version_mismatch(self):
        data = bytearray(to_bytes(self._weights()))
        data[4] = 99
        with pytest.raises(VersionMismatchError):
            from_bytes(bytes(data))

    def test_checksum(self):
        data = bytearray(to_bytes(self._weights()))
        data[-10] ^= 0xFF
        with pytest.raises(ChecksumError):
            from_bytes(bytes(data))

    def test_inconsistent_shape(self):
        import json
        import struct
        import zlib

        data = to_bytes(self._weights())
        n = struct.unpack("<I", data[8:12])[0]
        header = json.loads(data[12 : 12 + n])
        header["config"]["channels"] = 5
        hb = json.dumps(header).encode()
        body = data[4:8] + struct.pack("<I", len(hb)) + hb + data[12 + n : -4]
        forged = b"EGOF" + body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(InconsistentShapeError):
            from_bytes(forged)


class TestTrain:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        r = rng.uniform(0, 1, (16, 24))
        return r, 0.5 * r

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            train([], EgoNetConfig(**SMALL))

    def test_deterministic(self):
        pairs = [self._pair(0), self._pair(1)]
        w1, c1 = train(pairs, EgoNetConfig(**SMALL), epochs=3, seed=7, batch_size=1)
        w2, c2 = train(pairs, EgoNetConfig(**SMALL), epochs=3, seed=7, batch_size=1)
        assert c1 == c2
        assert to_bytes(w1) == to_bytes(w2)

    def test_scale_fixed_from_targets(self):
        r, e = self._pair()
        w, _ = train([(r, e)], EgoNetConfig(**SMALL), epochs=1)
        assert w.config.magnitude_scale == pytest.approx(e.max() ** 0.3)
        assert w.dtype == np.float32

    def test_zero_targets_push_outputs_down(self):
        r = np.random.default_rng(2).uniform(0, 1, (16, 24))
        cfg = EgoNetConfig(**SMALL)
        w, curve = train([(r, np.zeros_like(r))], cfg, epochs=60, warm_start=False)
        assert curve[-1] < curve[0]
        assert forward_compressed(w, r).mean() < forward_compressed(init_weights(w.config), r).mean()

    def test_warm_start_centres_output_on_target_mean(self):
        r, e = self._pair(3)
        cfg = EgoNetConfig(**SMALL)
        w, curve = train([(r, e)], cfg, epochs=1, lr=1e-12)
        m = np.mean(e**0.3) / e.max() ** 0.3
        assert float(w.tensors["decoder.bias"][0]) == pytest.approx(np.log(m / (1 - m)), rel=1e-5)
        cold, cold_curve = train([(r, e)], cfg, epochs=1, lr=1e-12, warm_start=False)
        assert abs(float(cold.tensors["decoder.bias"][0])) < 1e-9
        assert curve[0] < cold_curve[0]

    def test_warm_start_clamped_for_silent_targets(self):
        r = np.random.default_rng(4).uniform(0, 1, (16, 24))
        w, _ = train([(r, np.zeros_like(r))], EgoNetConfig(**SMALL), epochs=1, lr=1e-12)
        assert float(w.tensors["decoder.bias"][0]) == pytest.approx(np.log(1e-3 / (1 - 1e-3)), rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            train([(np.ones((16, 24)), np.ones((16, 25)))], EgoNetConfig(**SMALL))
