"""Holographic Reduced Representation primitives.

Vectors are 1-D (or batched, last axis = feature) real arrays. Binding is
circular convolution; unbinding binds with the exact spectral inverse.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import NearSingularError, ShapeError

EPS_INV = 1e-3


@dataclass(frozen=True)
class InvertibilityReport:
    ok: bool
    min_magnitude: float
    min_bin: int
    eps: float

    def __bool__(self):
        return self.ok


def random_vector(d, rng=None, size=None, dtype=np.float64):
    """Draw HRR vectors with i.i.d. N(0, 1/d) components."""
    rng = np.random.default_rng(rng)
    shape = (d,) if size is None else tuple(np.atleast_1d(size)) + (d,)
    return (rng.standard_normal(shape) / np.sqrt(d)).astype(dtype)


def delta(d, dtype=np.float64):
    """The binding identity ``[1, 0, ..., 0]``."""
    out = np.zeros(d, dtype=dtype)
    out[0] = 1.0
    return out


def _check_dims(x, y):
    if np.shape(x)[-1] != np.shape(y)[-1]:
        raise ShapeError(f"HRR dims differ: {np.shape(x)[-1]} vs {np.shape(y)[-1]}")


def bind(x, y):
    _check_dims(x, y)
    return numerics.circ_conv(x, y, n=np.shape(x)[-1])


def validate_invertible(y, eps=EPS_INV):
    y = np.asarray(y)
    mags = np.abs(numerics.rfft(y, y.shape[-1]))
    flat = mags.reshape(-1, mags.shape[-1]).min(axis=0)
    k = int(np.argmin(flat))
    return InvertibilityReport(bool(flat[k] >= eps), float(flat[k]), k, eps)


def inverse(y, eps=EPS_INV):
    """Exact inverse: the vector whose spectrum is ``1 / F(y)``.

    Raises :class:`NearSingularError` when any bin magnitude is below ``eps``.
    """
    y = np.asarray(y)
    d = y.shape[-1]
    spec = numerics.rfft(y, d)
    mags = np.abs(spec)
    if mags.size and mags.min() < eps:
        k = int(np.unravel_index(np.argmin(mags), mags.shape)[-1])
        raise NearSingularError(k, mags.min(), eps)
    return numerics.irfft(1.0 / spec, d, dtype=numerics.real_dtype(y.dtype))


def unbind(b, y, eps=EPS_INV):
    _check_dims(b, y)
    return bind(b, inverse(y, eps))


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def invertible_fraction(d, trials, eps=EPS_INV, seed=0):
    """Monte-Carlo estimate of P(validate_invertible) for N(0, 1/d) vectors."""
    rng = np.random.default_rng(seed)
    hits = sum(bool(validate_invertible(random_vector(d, rng), eps)) for _ in range(trials))
    return hits / trials
