"""FFT, circular convolution/correlation and elementwise kernels against loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgconv import numerics as nx
from hgconv.errors import InvalidLengthError, ShapeError

from conftest import loop_circ_conv, loop_circ_corr, naive_dft, naive_idft

LENGTHS = [1, 2, 3, 5, 8, 12, 16, 64, 100, 127, 512]


class TestFFT:
    @pytest.mark.parametrize("n", LENGTHS)
    def test_matches_naive_dft(self, n, rng):
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ref = naive_dft(x)
        np.testing.assert_allclose(nx.fft(x), ref, atol=1e-9 * max(1, n))

    @pytest.mark.parametrize("n", LENGTHS)
    def test_ifft_matches_naive_idft(self, n, rng):
        X = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        np.testing.assert_allclose(nx.ifft(X, real=False), naive_idft(X), atol=1e-10)

    @pytest.mark.parametrize("n", [3, 8, 12, 1000])
    def test_round_trip(self, n, rng):
        x = rng.standard_normal((4, n))
        np.testing.assert_allclose(nx.ifft(nx.fft(x)), x, atol=1e-10)

    def test_unit_impulse_is_flat(self):
        np.testing.assert_allclose(nx.fft([1.0, 0, 0, 0]), np.ones(4), atol=1e-15)

    def test_length_three_example(self):
        w = np.exp(-2j * np.pi / 3)
        np.testing.assert_allclose(nx.fft([1.0, 2.0, 3.0]), [6, 1 + 2 * w + 3 * w * w, 1 + 2 * w * w + 3 * w],
                                   atol=1e-12)

    @pytest.mark.parametrize("n", [8, 12, 100])
    def test_parseval(self, n, rng):
        x = rng.standard_normal(n)
        X = nx.fft(x)
        assert np.sum(x ** 2) == pytest.approx(np.sum(np.abs(X) ** 2) / n, rel=1e-12)

    def test_zero_pads_to_n(self, rng):
        x = rng.standard_normal(5)
        np.testing.assert_allclose(nx.fft(x, 8), naive_dft(np.r_[x, np.zeros(3)]), atol=1e-12)

    def test_float32_output_is_complex64(self):
        assert nx.fft(np.ones(8, np.float32)).dtype == np.complex64

    def test_batched_rows_independent(self, rng):
        x = rng.standard_normal((3, 2, 12))
        out = nx.fft(x)
        for idx in np.ndindex(3, 2):
            np.testing.assert_allclose(out[idx], naive_dft(x[idx]), atol=1e-10)

    def test_rejects_bad_lengths(self):
        with pytest.raises(InvalidLengthError):
            nx.fft(np.ones(3), 0)
        with pytest.raises(ShapeError):
            nx.fft(np.ones(5), 4)

    def test_real_ifft_drops_residue(self, rng):
        x = rng.standard_normal(12)
        out = nx.ifft(nx.fft(x))
        assert np.isrealobj(out)

    def test_fast_path_agrees_with_native(self, rng):
        x = rng.standard_normal((2, 100))
        np.testing.assert_allclose(nx.rfft(x, 100), nx.fft(x)[:, :51], atol=1e-10)
        np.testing.assert_allclose(nx.irfft(nx.rfft(x, 100), 100), x, atol=1e-12)


class TestCircConv:
    def test_identity_kernel(self):
        np.testing.assert_allclose(nx.circ_conv([1.0, 2, 3], [1.0, 0, 0], 3), [1, 2, 3], atol=1e-12)

    def test_shift_kernel(self):
        np.testing.assert_allclose(nx.circ_conv([1.0, 2, 3], [0.0, 1, 0], 3), [3, 1, 2], atol=1e-12)

    @pytest.mark.parametrize("n", [3, 8, 12, 64])
    @pytest.mark.parametrize("native", [False, True])
    def test_matches_loop_oracle(self, n, native, rng):
        for _ in range(5):
            x, w = rng.standard_normal((2, n))
            np.testing.assert_allclose(nx.circ_conv(x, w, n, native=native), loop_circ_conv(x, w, n),
                                       atol=1e-10)

    def test_short_kernel_zero_padded(self, rng):
        x = rng.standard_normal(10)
        w = rng.standard_normal(3)
        np.testing.assert_allclose(nx.circ_conv(x, w, 10), loop_circ_conv(x, w, 10), atol=1e-12)

    def test_period_is_exact_not_pow2(self, rng):
        # rounding 12 up to 16 would give a linear-ish, different result
        x, w = rng.standard_normal((2, 12))
        np.testing.assert_allclose(nx.circ_conv(x, w, 12), loop_circ_conv(x, w, 12), atol=1e-12)
        assert not np.allclose(nx.circ_conv(x, w, 16)[:12], loop_circ_conv(x, w, 12))

    def test_commutative(self, rng):
        x, w = rng.standard_normal((2, 17))
        np.testing.assert_allclose(nx.circ_conv(x, w, 17), nx.circ_conv(w, x, 17), atol=1e-12)

    def test_along_axis(self, rng):
        x = rng.standard_normal((2, 9, 3))
        w = rng.standard_normal((1, 9, 3))
        out = nx.circ_conv(x, w, 9, axis=1)
        for b in range(2):
            for h in range(3):
                np.testing.assert_allclose(out[b, :, h], loop_circ_conv(x[b, :, h], w[0, :, h], 9), atol=1e-12)

    def test_float32_precision(self, rng):
        x, w = rng.standard_normal((2, 512)).astype(np.float32)
        out = nx.circ_conv(x, w, 512)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, loop_circ_conv(x, w, 512), atol=1e-4)

    def test_errors(self):
        with pytest.raises(ShapeError):
            nx.circ_conv(np.ones(4), np.ones(5))
        with pytest.raises(ShapeError):
            nx.circ_conv(np.ones(6), np.ones(2), 4)
        with pytest.raises(InvalidLengthError):
            nx.circ_conv(np.ones(1), np.ones(1), 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
    def test_property_loop_oracle(self, n, seed):
        x, w = np.random.default_rng(seed).standard_normal((2, n))
        np.testing.assert_allclose(nx.circ_conv(x, w, n), loop_circ_conv(x, w, n), atol=1e-9)


class TestCircCorr:
    def test_identity_kernel(self, rng):
        g = rng.standard_normal(6)
        np.testing.assert_allclose(nx.circ_corr(g, np.eye(6)[0], 6), g, atol=1e-12)

    def test_shift_kernel_is_adjoint_of_shift(self):
        # conv with [0,1,0] shifts right by one, so its adjoint shifts left
        np.testing.assert_allclose(nx.circ_corr([1.0, 0, 0], [0.0, 1, 0], 3), [0, 0, 1], atol=1e-12)

    @pytest.mark.parametrize("n", [3, 8, 13])
    def test_matches_loop_oracle(self, n, rng):
        g, w = rng.standard_normal((2, n))
        np.testing.assert_allclose(nx.circ_corr(g, w, n), loop_circ_corr(g, w, n), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
    def test_adjoint_identity(self, n, seed):
        x, w, g = np.random.default_rng(seed).standard_normal((3, n))
        lhs = np.dot(nx.circ_conv(x, w, n), g)
        rhs = np.dot(x, nx.circ_corr(g, w, n))
        assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


class TestElementwise:
    def test_matmul_triple_loop(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        ref = np.zeros((2, 3, 5))
        for i in range(2):
            for j in range(3):
                for k in range(5):
                    ref[i, j, k] = sum(a[i, j, l] * b[l, k] for l in range(4))
        np.testing.assert_allclose(nx.matmul(a, b), ref, atol=1e-12)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            nx.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_add_mul_broadcast_errors(self):
        with pytest.raises(ShapeError):
            nx.add(np.ones(3), np.ones(4))
        with pytest.raises(ShapeError):
            nx.mul(np.ones((2, 3)), np.ones(2))
        np.testing.assert_array_equal(nx.mul(np.ones((2, 3)), np.arange(3.0)), [[0, 1, 2], [0, 1, 2]])

    def test_gelu_reference_values(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        c = np.sqrt(2 / np.pi)
        ref = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(nx.gelu(x), ref, rtol=1e-14)
        assert nx.gelu(np.array(0.0)) == 0.0

    def test_gelu_grad_finite_difference(self, rng):
        x = rng.standard_normal(50) * 3
        h = 1e-6
        fd = (nx.gelu(x + h) - nx.gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(nx.gelu_grad(x), fd, atol=1e-8)
        g, d = nx.gelu_and_grad(x)
        np.testing.assert_allclose(g, nx.gelu(x), rtol=1e-14)
        np.testing.assert_allclose(d, nx.gelu_grad(x), rtol=1e-14)

    def test_sigmoid_extremes_finite(self):
        out = nx.sigmoid(np.array([-1e4, 0.0, 1e4]))
        np.testing.assert_allclose(out, [0, 0.5, 1])

    def test_check_finite_debug(self):
        nx.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                nx.check_finite(np.array([1.0, np.nan]), "probe")
        finally:
            nx.set_debug(False)
