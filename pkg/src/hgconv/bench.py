"""Wall-time and peak-memory scaling of forward+backward over sequence length.

Peak memory comes from ``tracemalloc`` (numpy reports its buffers there),
measured in a separate untimed pass. Times are medians over ``reps``
repetitions. The naive mixer is a negative control: it applies the same
kind of circulant token mixing as a dense ``T x T`` matrix product.
"""

import csv
import math
import os
import platform
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import model as M
from . import train as TR
from .errors import ConfigError

CSV_HEADER = ["seq_len", "batch_size", "forward_ms", "forward_backward_ms",
              "peak_bytes", "tokens_per_s", "status"]


@dataclass
class ScalingRow:
    seq_len: int
    batch_size: int
    forward_ms: float = float("nan")
    forward_backward_ms: float = float("nan")
    peak_bytes: int = 0
    tokens_per_s: float = float("nan")
    status: str = "ok"


@dataclass
class ScalingReport:
    rows: List[ScalingRow]
    environment: dict = field(default_factory=dict)
    mixer: str = "hgconv"

    def ok_rows(self):
        return [r for r in self.rows if r.status == "ok"]


def ember_batch_size(T, divisor=1):
    """``max(2^(16 - log2 T), 1)``, divided by a desk-scale ``divisor``."""
    return max(int(2 ** (16 - math.log2(T))) // divisor, 1)


def environment(threads):
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    blas = [f"{i.get('internal_api')}:{i.get('version')}" for i in threadpool_info()]
    return {"cpu": cpu, "threads": threads, "python": platform.python_version(),
            "numpy": np.__version__, "blas": ";".join(blas)}


class NaiveMixer:
    """Dense circulant token mixing, ``out = C(w) @ y``, O(T^2 H).

    ``C(w)[n, j] = w[(n - j) mod T]`` with one kernel shared by all channels.
    The circulant is materialized in row blocks to bound memory.
    """

    def __init__(self, T, K, rng=0, dtype=np.float32, block=2048):
        rng = np.random.default_rng(rng)
        self.T = T
        self.w = np.zeros(T, dtype)
        self.w[:K] = rng.standard_normal(K) / np.sqrt(K)
        self.block = block
        # d[i] = w[(T - 1 - i) mod T]; row n of C is d[T-1-n : 2T-1-n]
        self._d = np.concatenate([self.w[::-1], self.w[::-1]])

    def _rows(self, start, stop):
        T = self.T
        return np.stack([self._d[T - 1 - n: 2 * T - 1 - n] for n in range(start, stop)])

    def forward(self, y):
        out = np.empty_like(y)
        for s in range(0, self.T, self.block):
            e = min(s + self.block, self.T)
            out[:, s:e] = np.einsum("nj,bjh->bnh", self._rows(s, e), y, optimize=True)
        return out

    def backward(self, g):
        gy = np.zeros_like(g)
        for s in range(0, self.T, self.block):
            e = min(s + self.block, self.T)
            gy += np.einsum("nj,bnh->bjh", self._rows(s, e), g[:, s:e], optimize=True)
        return gy


def _make_hgconv(config, T, B, seed):
    cfg = replace(config, max_seq_len=T)
    params = M.init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 256, size=(B, T))
    mask = np.ones((B, T), dtype=np.uint8)
    labels = rng.integers(0, cfg.num_classes, size=B)

    def fwd():
        return M.forward(tokens, mask, params, cfg, train=False)

    def fwd_bwd():
        logits, cache = M.forward(tokens, mask, params, cfg, train=False)
        _, gl = TR.smoothed_ce_loss(logits, labels, cfg.label_smoothing)
        return M.backward(gl, cache, params, cfg)

    return fwd, fwd_bwd


def _make_naive(config, T, B, seed):
    H = config.feature_dim
    mixer = NaiveMixer(T, min(config.kernel_dim, T), seed, config.np_dtype)
    y = np.random.default_rng(seed).standard_normal((B, T, H)).astype(config.np_dtype)

    def fwd():
        return mixer.forward(y)

    def fwd_bwd():
        out = mixer.forward(y)
        return mixer.backward(out)

    return fwd, fwd_bwd


def _median_ms(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def peak_bytes(fn):
    """Peak traced allocation while ``fn`` runs."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn()
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        if not was_tracing:
            tracemalloc.stop()


def run_scaling(config, seq_lens, reps=3, batch_size=None, batch_divisor=1, mixer="hgconv",
                threads=1, seed=0, measure_memory=True, warmup=1):
    """Time forward and forward+backward for each ``T`` in ``seq_lens``.

    ``batch_size=None`` applies the EMBER batch rule (scaled by
    ``batch_divisor``). A ``MemoryError`` marks the row ``OOM`` and the
    sweep continues.
    """
    seq_lens = list(seq_lens)
    if seq_lens != sorted(set(seq_lens)):
        raise ConfigError({"bench.seq_lens": "must be strictly increasing"})
    if any(T < config.kernel_dim for T in seq_lens):
        raise ConfigError({"bench.seq_lens": f"every T must be >= kernel_dim={config.kernel_dim}"})
    build = {"hgconv": _make_hgconv, "naive": _make_naive}.get(mixer)
    if build is None:
        raise ConfigError({"bench.mixer": f"unknown mixer {mixer!r}"})
    rows = []
    with threadpool_limits(limits=threads):
        for T in seq_lens:
            B = batch_size or ember_batch_size(T, batch_divisor)
            row = ScalingRow(T, B)
            try:
                fwd, fwd_bwd = build(config, T, B, seed)
                for _ in range(warmup):
                    fwd_bwd()
                row.forward_ms = _median_ms(fwd, reps)
                row.forward_backward_ms = _median_ms(fwd_bwd, reps)
                row.tokens_per_s = B * T / (row.forward_backward_ms / 1e3)
                if measure_memory:
                    row.peak_bytes = peak_bytes(fwd_bwd)
                del fwd, fwd_bwd
            except MemoryError:
                row.status = "OOM"
            rows.append(row)
    return ScalingReport(rows, environment(threads), mixer)


def fit_exponent(report):
    """Least-squares slope of log(forward+backward time) against log(T)."""
    if isinstance(report, ScalingReport):
        pts = [(r.seq_len, r.forward_backward_ms) for r in report.ok_rows()]
    else:
        pts = list(report)
    if len(pts) < 4:
        raise ValueError(f"need at least 4 measured rows to fit an exponent, got {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def memory_ratios(report):
    rows = report.ok_rows()
    return [b.peak_bytes / a.peak_bytes for a, b in zip(rows, rows[1:]) if a.peak_bytes > 0]


def write_csv(report, path):
    """Write rows under :data:`CSV_HEADER`, environment as ``#`` comment lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in report.environment.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(f"# mixer: {report.mixer}\n")
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.seq_len, r.batch_size, f"{r.forward_ms:.3f}", f"{r.forward_backward_ms:.3f}",
                        r.peak_bytes, f"{r.tokens_per_s:.1f}", r.status])


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(ScalingRow(int(rec["seq_len"]), int(rec["batch_size"]), float(rec["forward_ms"]),
                               float(rec["forward_backward_ms"]), int(rec["peak_bytes"]),
                               float(rec["tokens_per_s"]), rec["status"]))
    return ScalingReport(rows)
