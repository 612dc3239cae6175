"""Byte-sequence ingestion, batching and synthetic long-range tasks.

Files are read as opaque byte streams: byte values map to ids 0..255 and
positions past the end of the file get ``PAD_ID`` with mask 0. Long files
keep their head.
"""

import os
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .model import PAD_ID

MARKER_A = 0xAA
MARKER_B = 0xBB
MAJORITY_BYTES = (0x41, 0x42)


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class Manifest:
    entries: List[Tuple[str, int]]
    classes: List[str]

    @property
    def num_classes(self):
        return len(self.classes)

    def __len__(self):
        return len(self.entries)


def read_manifest(path, classes=None):
    """Parse a ``path<TAB>class`` manifest; ``#`` starts a comment line.

    Relative paths resolve against the manifest's directory. Class ids are
    assigned in sorted class-name order unless ``classes`` fixes the table.
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'path<TAB>class'")
            fpath, cname = parts[0].strip(), parts[1].strip()
            rows.append((os.path.join(base, fpath), cname))
    if not rows:
        raise DataError(f"{path}: manifest is empty")
    table = list(classes) if classes is not None else sorted({c for _, c in rows})
    ids = {c: i for i, c in enumerate(table)}
    unknown = sorted({c for _, c in rows} - set(ids))
    if unknown:
        raise DataError(f"{path}: classes not in table: {unknown}")
    return Manifest([(p, ids[c]) for p, c in rows], table)


def load_bytes(path, T):
    """First ``T`` bytes of a file as ``(tokens, mask)`` rows of length ``T``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read(T)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    tokens = np.full(T, PAD_ID, dtype=np.int64)
    mask = np.zeros(T, dtype=np.uint8)
    n = len(raw)
    tokens[:n] = np.frombuffer(raw, dtype=np.uint8)
    mask[:n] = 1
    return tokens, mask


def _stack(rows, labels):
    tokens = np.stack([r[0] for r in rows]) if rows else np.zeros((0, 0), np.int64)
    mask = np.stack([r[1] for r in rows]) if rows else np.zeros((0, 0), np.uint8)
    return Batch(tokens, mask, np.asarray(labels, dtype=np.int64))


def _order(n, seed):
    if seed is None:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)


def make_batches(manifest, T, B, seed=None):
    """Yield :class:`Batch` objects, loading files lazily.

    The order is a deterministic permutation for ``seed`` (file order when
    ``seed`` is None); the last batch may be short.
    """
    order = _order(len(manifest.entries), seed)
    for s in range(0, len(order), B):
        picked = [manifest.entries[i] for i in order[s:s + B]]
        yield _stack([load_bytes(p, T) for p, _ in picked], [lab for _, lab in picked])


@dataclass
class ArrayDataset:
    """An in-memory dataset of equal-width token rows."""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    prefix_ceiling: Optional[float] = None

    def __len__(self):
        return len(self.labels)

    def batches(self, B, seed=None):
        order = _order(len(self.labels), seed)
        for s in range(0, len(order), B):
            idx = order[s:s + B]
            yield Batch(self.tokens[idx], self.mask[idx], self.labels[idx])

    def label_histogram(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ManifestDataset:
    """Manifest-backed dataset; files are read batch by batch."""

    manifest: Manifest
    T: int

    @property
    def num_classes(self):
        return self.manifest.num_classes

    def __len__(self):
        return len(self.manifest)

    def batches(self, B, seed=None):
        return make_batches(self.manifest, self.T, B, seed)


def dataset_from_manifest(manifest, T):
    rows = [load_bytes(p, T) for p, _ in manifest.entries]
    b = _stack(rows, [lab for _, lab in manifest.entries])
    return ArrayDataset(b.tokens, b.mask, b.labels, manifest.num_classes)


# ---------------------------------------------------------------------------
# synthetic long-range tasks
# ---------------------------------------------------------------------------

def marker_pair_label(row, T=None):
    """1 iff 0xAA occurs in the first T/8 positions and 0xBB in the last T/8."""
    row = np.asarray(row)
    T = len(row) if T is None else T
    w = T // 8
    return int(bool((row[:w] == MARKER_A).any() and (row[T - w:T] == MARKER_B).any()))


def majority_byte_label(row):
    """0 if the first designated byte is more frequent than the second, else 1."""
    row = np.asarray(row)
    a, b = MAJORITY_BYTES
    return int((row == a).sum() <= (row == b).sum())


def _noise(rng, shape, exclude):
    allowed = np.setdiff1d(np.arange(256), np.asarray(exclude))
    return allowed[rng.integers(0, len(allowed), size=shape)]


def _prefix_ceiling(keys, labels):
    """Best accuracy of any classifier that only sees ``keys``, by counting."""
    groups = {}
    for k, lab in zip(keys, labels):
        groups.setdefault(k, Counter())[int(lab)] += 1
    return sum(max(c.values()) for c in groups.values()) / len(labels)


def synth_longrange(task, T, num_samples, seed=0):
    """Generate a balanced synthetic dataset of full-length byte rows.

    ``marker-pair``: positives carry one 0xAA in the first T/8 positions and
    one 0xBB in the last T/8; negatives are split evenly between "0xAA only",
    "0xBB only" and "neither". ``majority-byte``: the label says which of two
    designated bytes occurs more often.

    ``prefix_ceiling`` on the result is the best accuracy reachable from the
    first half of each row alone.
    """
    if T < 16:
        raise ConfigError({"max_seq_len": "synthetic tasks need T >= 16"})
    rng = np.random.default_rng(seed)
    n_pos = num_samples // 2 + (rng.integers(0, 2) if num_samples % 2 else 0)
    labels = np.zeros(num_samples, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(num_samples)]
    w = T // 8

    if task == "marker-pair":
        tokens = _noise(rng, (num_samples, T), [MARKER_A, MARKER_B])
        neg_kind = np.arange(num_samples - n_pos) % 3
        neg_kind = neg_kind[rng.permutation(len(neg_kind))]
        neg_iter = iter(neg_kind)
        for i in range(num_samples):
            kind = 3 if labels[i] == 1 else next(neg_iter)
            if kind in (0, 3):
                tokens[i, rng.integers(0, w)] = MARKER_A
            if kind in (1, 3):
                tokens[i, T - w + rng.integers(0, w)] = MARKER_B
        assert all(marker_pair_label(r) == lab for r, lab in zip(tokens, labels))
        keys = [bool((r[: T // 2] == MARKER_A).any()) for r in tokens]
    elif task == "majority-byte":
        a, b = MAJORITY_BYTES
        tokens = _noise(rng, (num_samples, T), [a, b])
        for i in range(num_samples):
            total = int(rng.integers(3, max(4, T // 8)))
            lo = int(rng.integers(0, (total + 1) // 2))
            hi = total - lo
            hi = max(hi, lo + 1)
            na, nb = (hi, lo) if labels[i] == 0 else (lo, hi)
            pos = rng.choice(T, size=na + nb, replace=False)
            tokens[i, pos[:na]] = a
            tokens[i, pos[na:]] = b
        assert all(majority_byte_label(r) == lab for r, lab in zip(tokens, labels))
        keys = [int(np.sign((r[: T // 2] == a).sum() - (r[: T // 2] == b).sum())) for r in tokens]
    else:
        raise ConfigError({"task": f"unknown synthetic task {task!r}"})

    mask = np.ones((num_samples, T), dtype=np.uint8)
    return ArrayDataset(tokens.astype(np.int64), mask, labels, 2, name=task,
                        prefix_ceiling=_prefix_ceiling(keys, labels))
