"""Fast property checks run by ``hgconv selftest`` (well under a minute)."""

import time
from dataclasses import dataclass

import numpy as np

from . import hrr
from . import numerics as nx
from .gradcheck import check_model_gradients
from .model import ModelConfig


@dataclass
class PropertyResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: error {self.error:.3e} (tolerance {self.tolerance:.0e}, {self.seconds:.2f}s)"

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "error": self.error,
                "tolerance": self.tolerance, "seconds": self.seconds}


def _naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def fft_oracle():
    rng = np.random.default_rng(0)
    err = 0.0
    for n in (1, 3, 8, 12, 64, 100):
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ref = _naive_dft(x)
        err = max(err, np.abs(nx.fft(x) - ref).max() / max(np.abs(ref).max(), 1.0))
    return err


def conv_oracle():
    rng = np.random.default_rng(1)
    err = 0.0
    for n in (3, 8, 12, 64):
        x, w = rng.standard_normal((2, n))
        ref = np.array([sum(x[j] * w[(m - j) % n] for j in range(n)) for m in range(n)])
        err = max(err, np.abs(nx.circ_conv(x, w, n) - ref).max(),
                  np.abs(nx.circ_conv(x, w, n, native=True) - ref).max())
    return err


def corr_adjoint():
    rng = np.random.default_rng(2)
    err = 0.0
    for n in (5, 16, 33):
        x, w, g = rng.standard_normal((3, n))
        lhs = np.dot(nx.circ_conv(x, w, n), g)
        rhs = np.dot(x, nx.circ_corr(g, w, n))
        err = max(err, abs(lhs - rhs) / (abs(lhs) + 1.0))
    return err


def bind_roundtrip():
    rng = np.random.default_rng(3)
    err, done = 0.0, 0
    while done < 20:
        x = hrr.random_vector(256, rng)
        y = hrr.random_vector(256, rng)
        if not hrr.validate_invertible(y):
            continue
        err = max(err, np.abs(hrr.unbind(hrr.bind(x, y), y) - x).max())
        done += 1
    return err


def gradient_check():
    cfg = ModelConfig(vocab_size=257, max_seq_len=8, feature_dim=4, kernel_dim=4, num_layers=2,
                      num_classes=3, dropout=0.1, label_smoothing=0.1, dtype="float64")
    return max(check_model_gradients(cfg, B=2, seed=0).values())


PROPERTIES = [
    ("fft-vs-naive-dft", fft_oracle, 1e-10),
    ("circ-conv-vs-loop", conv_oracle, 1e-10),
    ("circ-corr-adjoint", corr_adjoint, 1e-10),
    ("bind-unbind-roundtrip", bind_roundtrip, 1e-4),
    ("gradient-check", gradient_check, 1e-4),
]


def run_all():
    results = []
    for name, fn, tol in PROPERTIES:
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:  # a crashing property is a failing property
            err = float("inf")
        ok = bool(np.isfinite(err) and err < tol)
        results.append(PropertyResult(name, ok, err, tol, time.perf_counter() - t0))
    return results
