"""Dense array math and FFTs used by every other hgconv module.

Tensors are plain ``numpy.ndarray`` values. Training runs in float32; the
gradient checks run the same code in float64, so every routine here keeps
the dtype of its inputs.

Two FFT routes exist:

* :func:`fft` / :func:`ifft` are a self-contained implementation
  (vectorized radix-2 Cooley-Tukey for powers of two, Bluestein's chirp-z
  algorithm for every other length).
* :func:`rfft` / :func:`irfft` wrap ``scipy.fft`` and are the hot path used
  by the layers; they accept any axis and keep float32 as float32.

Normalization convention: the forward transform is unscaled and the inverse
carries the ``1/n`` factor (the usual engineering convention).
"""

import logging
import os

import numpy as np
import scipy.fft

from .errors import InvalidLengthError, ShapeError

log = logging.getLogger(__name__)

_debug = bool(os.environ.get("HGCONV_DEBUG"))

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def set_debug(flag):
    """Turn NaN/Inf checks and imaginary-residue reporting on or off."""
    global _debug
    _debug = bool(flag)


def debug_enabled():
    return _debug


def check_finite(arr, name="tensor"):
    """Raise ``FloatingPointError`` on non-finite values (debug mode only)."""
    if _debug and not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{name}: {bad} non-finite values")
    return arr


def complex_dtype(dtype):
    return np.complex64 if np.dtype(dtype) in (np.float32, np.complex64) else np.complex128


def real_dtype(dtype):
    return np.float32 if np.dtype(dtype) in (np.float32, np.complex64) else np.float64


# ---------------------------------------------------------------------------
# native FFT
# ---------------------------------------------------------------------------

def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


def _fft_pow2(x):
    # x: complex128 of shape (batch, n), n a power of two
    batch, n = x.shape
    m = min(n, 32)
    k = np.arange(m)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / m)
    out = np.einsum("kj,bjc->bkc", dft, x.reshape(batch, m, n // m))
    while out.shape[1] < n:
        half = out.shape[2] // 2
        even = out[:, :, :half]
        odd = out[:, :, half:]
        rows = out.shape[1]
        twiddle = np.exp(-1j * np.pi * np.arange(rows) / rows)[None, :, None]
        odd = twiddle * odd
        out = np.concatenate([even + odd, even - odd], axis=1)
    return out.reshape(batch, n)


def _fft_bluestein(x):
    batch, n = x.shape
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n, dtype=np.int64)
    # k^2 mod 2n keeps the chirp phase exact for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros((batch, m), dtype=np.complex128)
    a[:, :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    if n > 1:
        b[m - n + 1:] = np.conj(chirp[1:][::-1])
    fa = _fft_pow2(a)
    fb = _fft_pow2(b[None, :])
    conv = np.conj(_fft_pow2(np.conj(fa * fb))) / m
    return conv[:, :n] * chirp


def _fft_rows(x):
    n = x.shape[-1]
    if _is_pow2(n):
        return _fft_pow2(x)
    return _fft_bluestein(x)


def fft(x, n=None):
    """Length-``n`` DFT of ``x`` along the last axis.

    ``x`` is zero-padded up to ``n``; it may not be longer than ``n``.
    Returns a complex array whose precision follows the input dtype.
    """
    x = np.asarray(x)
    length = x.shape[-1] if n is None else int(n)
    if length < 1:
        raise InvalidLengthError(f"fft length must be >= 1, got {length}")
    if x.shape[-1] > length:
        raise ShapeError(f"input of length {x.shape[-1]} exceeds fft length {length}")
    out_dtype = complex_dtype(x.dtype) if x.dtype.kind in "fc" else np.complex128
    lead = x.shape[:-1]
    rows = np.zeros((int(np.prod(lead, dtype=np.int64)), length), dtype=np.complex128)
    rows[:, : x.shape[-1]] = x.reshape(-1, x.shape[-1])
    return _fft_rows(rows).reshape(*lead, length).astype(out_dtype, copy=False)


def ifft(spectrum, real=True):
    """Inverse DFT along the last axis.

    With ``real=True`` the imaginary residue is dropped (and reported in
    debug mode); the spectrum is then assumed conjugate-symmetric.
    """
    s = np.asarray(spectrum)
    n = s.shape[-1]
    if n < 1:
        raise InvalidLengthError("ifft length must be >= 1")
    lead = s.shape[:-1]
    rows = np.conj(s.reshape(-1, n).astype(np.complex128))
    out = (np.conj(_fft_rows(rows)) / n).reshape(*lead, n)
    cdt = complex_dtype(s.dtype) if s.dtype.kind in "fc" else np.complex128
    if not real:
        return out.astype(cdt, copy=False)
    if _debug:
        residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
        log.debug("ifft imaginary residue %.3e", residue)
    return out.real.astype(real_dtype(cdt), copy=False)


# ---------------------------------------------------------------------------
# fast real transforms (scipy/pocketfft) used on the hot path
# ---------------------------------------------------------------------------

def rfft(x, n, axis=-1):
    return scipy.fft.rfft(x, n=n, axis=axis)


def irfft(spec, n, axis=-1, dtype=None):
    out = scipy.fft.irfft(spec, n=n, axis=axis)
    if dtype is not None and out.dtype != dtype:
        out = out.astype(dtype)
    return out


def _period(x, w, n, axis):
    lx = x.shape[axis]
    lw = w.shape[axis] if w.ndim == x.ndim else w.shape[-1]
    if n is None:
        if lx != lw:
            raise ShapeError(f"padded lengths differ: {lx} vs {lw}")
        return lx
    n = int(n)
    if n < 1:
        raise InvalidLengthError(f"period must be >= 1, got {n}")
    if lx > n or lw > n:
        raise ShapeError(f"inputs of length {lx}, {lw} do not fit period {n}")
    return n


def circ_conv(x, w, n=None, axis=-1, native=False):
    """Circular convolution of period ``n`` along ``axis``.

    ``out[m] = sum_j x[j] w[(m - j) mod n]``. Inputs shorter than ``n`` are
    zero-padded. ``w`` broadcasts against ``x`` after padding.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    n = _period(x, w, n, axis)
    dtype = np.result_type(x.dtype, w.dtype, np.float32)
    # float64 accumulation, one rounding at the end (the layers call rfft directly)
    x64, w64 = x.astype(np.float64, copy=False), w.astype(np.float64, copy=False)
    if native:
        xs = fft(np.moveaxis(x64, axis, -1), n)
        ws = fft(np.moveaxis(w64, axis, -1) if w.ndim == x.ndim else w64, n)
        return np.moveaxis(ifft(xs * ws), -1, axis).astype(dtype, copy=False)
    out = irfft(rfft(x64, n, axis) * rfft(w64, n, axis if w.ndim == x.ndim else -1), n, axis)
    return out.astype(dtype, copy=False)


def circ_corr(g, w, n=None, axis=-1):
    """Circular correlation ``out[j] = sum_m g[m] w[(m - j) mod n]``.

    This is the adjoint of :func:`circ_conv` in its first argument, so
    ``<circ_conv(x, w), g> == <x, circ_corr(g, w)>``.
    """
    g = np.asarray(g)
    w = np.asarray(w)
    n = _period(g, w, n, axis)
    dtype = np.result_type(g.dtype, w.dtype, np.float32)
    g64, w64 = g.astype(np.float64, copy=False), w.astype(np.float64, copy=False)
    ws = np.conj(rfft(w64, n, axis if w.ndim == g.ndim else -1))
    return irfft(rfft(g64, n, axis) * ws, n, axis).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def _broadcast_check(a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as exc:
        raise ShapeError(f"shapes {np.shape(a)} and {np.shape(b)} do not broadcast") from exc


def add(a, b):
    _broadcast_check(a, b)
    return np.add(a, b)


def mul(a, b):
    _broadcast_check(a, b)
    return np.multiply(a, b)


def matmul(a, b):
    """Contract the last axis of ``a`` with the first axis of ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(x):
    """Tanh-approximated GELU: ``0.5 x (1 + tanh(c (x + a x^3)))``."""
    x = np.asarray(x)
    c = x.dtype.type(GELU_C) if x.dtype.kind == "f" else GELU_C
    return 0.5 * x * (1.0 + np.tanh(c * (x + GELU_A * x * x * x)))


def gelu_grad(x):
    """Exact derivative of :func:`gelu`."""
    x = np.asarray(x)
    c = x.dtype.type(GELU_C) if x.dtype.kind == "f" else GELU_C
    x2 = x * x
    t = np.tanh(c * x * (1.0 + GELU_A * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_A * x2)


def gelu_and_grad(x):
    """Return ``(gelu(x), gelu_grad(x))`` sharing the tanh evaluation."""
    c = x.dtype.type(GELU_C)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + GELU_A * x2))
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_A * x2)
    return y, dy
