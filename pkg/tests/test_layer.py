"""Single-layer forward semantics and analytic gradients."""

import numpy as np
import pytest

from hgconv import layer as L
from hgconv import numerics as nx
from hgconv.errors import ConfigError, ShapeError, StateError
from hgconv.gradcheck import numeric_grad, rel_error

from conftest import loop_circ_conv

COMBOS = [(k, p) for k in ("layer", "batch") for p in ("pre", "post")]


def make_params(H=4, K=4, T=8, seed=0, dtype=np.float64, perturb=True):
    rng = np.random.default_rng(seed)
    p = L.init_layer(H, K, T, rng, dtype)
    if perturb:
        p.b_alpha[:] = rng.standard_normal(H) * 0.5
        p.b_beta[:] = rng.standard_normal(H) * 0.5
        p.norm_gain[:] = 1 + rng.standard_normal(H) * 0.3
        p.norm_bias[:] = rng.standard_normal(H) * 0.3
    return p


class TestEncodeDecode:
    def test_delta_filter_is_identity(self, rng):
        x = rng.standard_normal((5, 8))
        np.testing.assert_allclose(L.encode(x, np.eye(8)[0]), x, atol=1e-14)
        np.testing.assert_allclose(L.decode(x, np.eye(8)[0]), x, atol=1e-14)

    def test_encode_shift_example(self):
        out = L.encode(np.array([[1.0, 2.0, 3.0]]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(out, [[3, 1, 2]], atol=1e-12)

    def test_encode_matches_row_oracle(self, rng):
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal(6)
        out = L.encode(x, w)
        for t in range(3):
            np.testing.assert_allclose(out[t], loop_circ_conv(x[t], w, 6), atol=1e-12)

    @pytest.mark.parametrize("op", ["encode", "decode"])
    def test_token_locality(self, op, rng):
        x = rng.standard_normal((10, 8))
        w = rng.standard_normal(8) / np.sqrt(8)
        f = getattr(L, op)
        x2 = x.copy()
        x2[5] += rng.standard_normal(8)
        diff = np.abs(f(x2, w) - f(x, w)).max(axis=1)
        assert diff[5] > 1e-6
        assert np.all(np.delete(diff, 5) == 0)

    def test_decode_inverts_bind_h256(self, rng):
        from hgconv import hrr

        while True:
            w = hrr.random_vector(256, rng)
            if hrr.validate_invertible(w):
                break
        x = rng.standard_normal((4, 256))
        np.testing.assert_allclose(L.decode(L.encode(x, w), w), x, atol=1e-4)

    def test_clamped_bins_keep_phase(self):
        w = np.ones(8) + np.eye(8)[0] * 1e-6  # near-singular
        V, free = L.inverse_spectrum(w)
        assert not free.all()
        W = np.fft.rfft(w)
        for k in np.flatnonzero(~free):
            assert abs(1 / V[k]) == pytest.approx(1e-3, rel=1e-9)
            if abs(W[k]) > 0:
                assert np.angle(1 / V[k]) == pytest.approx(np.angle(W[k]), abs=1e-6)
        assert np.all(np.isfinite(L.decode(np.ones((2, 8)), w)))

    def test_decode_gradient_wrt_filter(self, rng):
        h = rng.standard_normal((4, 8))
        w = rng.standard_normal(8) / np.sqrt(8)
        gz = rng.standard_normal((4, 8))
        _, gw = L.decode_backward(gz, h, w)
        fd = numeric_grad(lambda: float(np.sum(L.decode(h, w) * gz)), w)
        assert rel_error(gw, fd) < 1e-4

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            L.encode(np.ones((2, 4)), np.ones(5))
        with pytest.raises(ShapeError):
            L.decode(np.ones((2, 4)), np.ones(3))


class TestGlobalConv:
    def test_delta_kernel(self, rng):
        y = rng.standard_normal((6, 3))
        wc = np.zeros((2, 3))
        wc[0] = 1
        np.testing.assert_allclose(L.global_conv(y, wc, np.zeros(3)), nx.gelu(y), atol=1e-12)

    def test_pure_bias_path(self, rng):
        y = rng.standard_normal((6, 3))
        np.testing.assert_allclose(L.global_conv(y, np.zeros((2, 3)), np.ones(3)), nx.gelu(y), atol=1e-12)

    def test_double_loop_oracle(self, rng):
        T, K, H = 4, 2, 3
        y = rng.standard_normal((T, H))
        wc = rng.standard_normal((K, H))
        wb = rng.standard_normal(H)
        padded = np.vstack([wc, np.zeros((T - K, H))])
        ref = np.zeros((T, H))
        for h in range(H):
            for m in range(T):
                ref[m, h] = sum(y[j, h] * padded[(m - j) % T, h] for j in range(T)) + y[m, h] * wb[h]
        np.testing.assert_allclose(L.global_conv(y, wc, wb), nx.gelu(ref), atol=1e-5)

    def test_dense_kernel_mixes_everything(self, rng):
        T, H = 12, 2
        y = rng.standard_normal((T, H))
        wc = rng.standard_normal((T, H))
        # checked before gelu, whose negative tail can round to exactly zero
        base = L.global_conv(y, wc, np.zeros(H), activation=False)
        for t in range(T):
            y2 = y.copy()
            y2[t] += 1.0
            moved = np.abs(L.global_conv(y2, wc, np.zeros(H), activation=False) - base)
            assert np.all(moved.max(axis=1) > 0)

    def test_shift_equivariance(self, rng):
        y = rng.standard_normal((9, 3))
        wc = rng.standard_normal((4, 3))
        out = L.global_conv(y, wc, np.zeros(3), activation=False)
        shifted = L.global_conv(np.roll(y, 2, axis=0), wc, np.zeros(3), activation=False)
        np.testing.assert_allclose(shifted, np.roll(out, 2, axis=0), atol=1e-12)

    def test_kernel_longer_than_sequence(self):
        with pytest.raises(ConfigError):
            L.global_conv(np.ones((3, 2)), np.ones((4, 2)), np.ones(2))
        with pytest.raises(ConfigError):
            L.init_layer(4, 9, 8, 0)

    def test_kernel_gradient_is_k_by_h(self, rng):
        y = rng.standard_normal((2, 10, 3))
        wc = rng.standard_normal((4, 3))
        wb = rng.standard_normal(3)
        gs = rng.standard_normal((2, 10, 3))
        gy, gwc, gwb = L.global_conv_backward(gs, y, wc, wb)
        assert gwc.shape == (4, 3) and gwb.shape == (3,)

        def f():
            return float(np.sum(L.global_conv_pre(y, wc, wb) * gs))

        assert rel_error(gwc, numeric_grad(f, wc)) < 1e-8
        assert rel_error(gwb, numeric_grad(f, wb)) < 1e-8
        assert rel_error(gy, numeric_grad(f, y)) < 1e-8


class TestGLU:
    def test_zero_gate_halves(self, rng):
        z = rng.standard_normal((3, 4))
        wa = rng.standard_normal((4, 4))
        ba = rng.standard_normal(4)
        out = L.glu(z, wa, ba, np.zeros((4, 4)), np.zeros(4))
        np.testing.assert_allclose(out, 0.5 * (z @ wa + ba), atol=1e-14)
        np.testing.assert_allclose(L.glu(z, np.eye(4), np.zeros(4), np.zeros((4, 4)), np.zeros(4)), 0.5 * z)

    def test_scalar_loop_oracle(self, rng):
        z = rng.standard_normal((3, 4))
        wa, wb = rng.standard_normal((2, 4, 4))
        ba, bb = rng.standard_normal((2, 4))
        ref = np.zeros((3, 4))
        for t in range(3):
            for j in range(4):
                a = sum(z[t, i] * wa[i, j] for i in range(4)) + ba[j]
                q = sum(z[t, i] * wb[i, j] for i in range(4)) + bb[j]
                ref[t, j] = a / (1 + np.exp(-q))
        np.testing.assert_allclose(L.glu(z, wa, ba, wb, bb), ref, atol=1e-6)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            L.glu(np.ones((2, 3)), np.ones((4, 4)), np.ones(4), np.ones((4, 4)), np.ones(4))


class TestNorm:
    def test_layer_norm_constant_row(self):
        out = L.norm(np.full((2, 5), 3.0), "layer", np.ones(5), np.zeros(5))
        np.testing.assert_allclose(out, 0, atol=1e-12)

    def test_layer_norm_moments(self, rng):
        out = L.norm(rng.standard_normal((7, 16)) * 4 + 2, "layer", np.ones(16), np.zeros(16))
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)

    def test_batch_norm_two_pass_oracle(self, rng):
        x = rng.standard_normal((2, 4, 3))
        stats = L.BatchNormStats(np.zeros(3), np.ones(3), 0)
        out = L.norm(x, "batch", np.ones(3), np.zeros(3), train=True, stats=stats)
        for h in range(3):
            vals = [x[b, t, h] for b in range(2) for t in range(4)]
            mu = sum(vals) / 8
            var = sum((v - mu) ** 2 for v in vals) / 8
            for b in range(2):
                for t in range(4):
                    assert out[b, t, h] == pytest.approx((x[b, t, h] - mu) / np.sqrt(var + 1e-5), abs=1e-6)
            assert stats.mean[h] == pytest.approx(0.1 * mu)
            assert stats.var[h] == pytest.approx(0.9 + 0.1 * var)
        assert stats.count == 1

    def test_batch_norm_ignores_pads(self, rng):
        x = rng.standard_normal((2, 5, 3))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
        a = L.norm(x, "batch", np.ones(3), np.zeros(3), mask=mask)
        x2 = x.copy()
        x2[0, 3:] = 100.0
        b = L.norm(x2, "batch", np.ones(3), np.zeros(3), mask=mask)
        np.testing.assert_allclose(a[mask == 1], b[mask == 1], atol=1e-12)

    def test_batch_norm_eval_needs_stats(self):
        with pytest.raises(StateError):
            L.norm(np.ones((1, 2, 3)), "batch", np.ones(3), np.zeros(3), train=False,
                   stats=L.BatchNormStats(np.zeros(3), np.ones(3), 0))

    def test_batch_norm_eval_uses_running_stats(self, rng):
        stats = L.BatchNormStats(np.full(3, 2.0), np.full(3, 4.0), 5)
        x = rng.standard_normal((1, 2, 3))
        out = L.norm(x, "batch", np.ones(3), np.zeros(3), train=False, stats=stats)
        np.testing.assert_allclose(out, (x - 2) / np.sqrt(4 + 1e-5))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            L.norm(np.ones((2, 3)), "group", np.ones(3), np.zeros(3))


def _layer_loss(x, p, mask, kind, placement, dropout, seeds, gout):
    out, _ = L.layer_forward(x, p, mask, kind=kind, placement=placement, dropout=dropout,
                             train=True, dropout_seeds=seeds)
    return float(np.sum(out * gout))


class TestLayer:
    @pytest.mark.parametrize("kind,placement", COMBOS)
    @pytest.mark.parametrize("dropout", [0.0, 0.25])
    def test_gradients_match_finite_differences(self, kind, placement, dropout, rng):
        B, T, H, K = 2, 8, 4, 4
        p = make_params(H, K, T)
        x = rng.standard_normal((B, T, H))
        mask = np.ones((B, T))
        mask[1, 6:] = 0
        x[1, 6:] = 0
        seeds = [(3, b) for b in range(B)]
        gout = rng.standard_normal((B, T, H))
        stats = p.norm_stats

        def f():
            p.norm_stats = L.BatchNormStats(stats.mean.copy(), stats.var.copy(), 0)
            return _layer_loss(x, p, mask, kind, placement, dropout, seeds, gout)

        p.norm_stats = L.BatchNormStats(stats.mean.copy(), stats.var.copy(), 0)
        _, acts = L.layer_forward(x, p, mask, kind=kind, placement=placement, dropout=dropout,
                                  train=True, dropout_seeds=seeds)
        gx, grads = L.layer_backward(gout, acts, p, dropout)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        for name in L.PARAM_NAMES:
            err = rel_error(getattr(grads, name), numeric_grad(f, getattr(p, name)))
            assert err < 1e-4, (name, err)

    @pytest.mark.parametrize("kind,placement", COMBOS)
    def test_zero_glu_is_identity(self, kind, placement, rng):
        p = make_params(perturb=False)
        p.w_alpha[:] = 0
        p.b_alpha[:] = 0
        x = rng.standard_normal((2, 8, 4))
        out, acts = L.layer_forward(x, p, kind=kind, placement=placement, train=True,
                                    dropout=0.5, dropout_seeds=[0, 1])
        np.testing.assert_array_equal(out, x)
        g = rng.standard_normal(x.shape)
        gx, _ = L.layer_backward(g, acts, p, 0.5)
        if placement == "pre":
            np.testing.assert_array_equal(gx, g)
        else:
            np.testing.assert_allclose(gx, g, atol=1e-12)

    @pytest.mark.parametrize("T,H", [(8, 4), (1000, 4), (8, 256), (1000, 256)])
    def test_shape_contract(self, T, H, rng):
        p = L.init_layer(H, 4, T, rng, np.float32)
        x = rng.standard_normal((T, H)).astype(np.float32)
        out, _ = L.layer_forward(x, p)
        assert out.shape == (T, H) and out.dtype == np.float32

    def test_eval_is_deterministic(self, rng):
        p = make_params()
        x = rng.standard_normal((2, 8, 4))
        a, _ = L.layer_forward(x, p, dropout=0.5)
        b, _ = L.layer_forward(x, p, dropout=0.5)
        assert a.tobytes() == b.tobytes()

    def test_dropout_needs_seeds(self, rng):
        with pytest.raises(StateError):
            L.layer_forward(rng.standard_normal((1, 8, 4)), make_params(), dropout=0.1, train=True)

    def test_dropout_keep_rate_and_rows(self):
        keep = L.dropout_keep((3, 200, 50), 0.3, [(0, b) for b in range(3)])
        assert keep.mean() == pytest.approx(0.7, abs=0.01)
        again = L.dropout_keep((1, 200, 50), 0.3, [(0, 2)])
        np.testing.assert_array_equal(keep[2], again[0])

    def test_stale_cache(self, rng):
        p = make_params()
        _, acts = L.layer_forward(rng.standard_normal((2, 8, 4)), p)
        with pytest.raises(StateError):
            L.layer_backward(np.ones((2, 7, 4)), acts, p)

    def test_input_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.layer_forward(rng.standard_normal((2, 8, 5)), make_params())

    def test_encode_fault_breaks_gradient(self, rng):
        x = rng.standard_normal((1, 8, 4))
        p = make_params()
        g = rng.standard_normal(x.shape)
        _, acts = L.layer_forward(x, p)
        good, _ = L.layer_backward(g, acts, p)
        L.FAULTS.add("encode")
        bad, _ = L.layer_backward(g, acts, p)
        assert not np.allclose(good, bad)
