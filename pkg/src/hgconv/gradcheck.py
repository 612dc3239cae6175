"""Central finite-difference checks of the analytic gradients (float64)."""

from dataclasses import replace

import numpy as np

from . import model as M
from . import train as TR


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    """``|a - b| / (|a| + |b|)`` in the Frobenius norm; 0 when both vanish."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def random_batch(config, B, rng, min_len=None):
    T = config.max_seq_len
    rng = np.random.default_rng(rng)
    lengths = rng.integers(min_len or max(T // 2, 1), T + 1, size=B)
    lengths[0] = T
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.uint8)
    if config.input_mode == "tokens":
        tokens = rng.integers(0, config.vocab_size - 1, size=(B, T))
        tokens = np.where(mask == 1, tokens, config.vocab_size - 1)
    else:
        tokens = rng.standard_normal((B, T)) * mask
    labels = rng.integers(0, config.num_classes, size=B)
    return tokens, mask, labels


def perturb_params(params, rng, scale=0.5):
    """Give biases and norm affines non-trivial values so every path is exercised."""
    rng = np.random.default_rng(rng)
    for name, arr in params.named().items():
        if name.endswith(("b_alpha", "b_beta", "norm_bias", "head_b", "input_b")):
            arr[...] = rng.standard_normal(arr.shape) * scale
        elif name.endswith("norm_gain"):
            arr[...] = 1.0 + rng.standard_normal(arr.shape) * scale
    return params


def check_model_gradients(config, B=2, seed=0, train=True, h=1e-6, names=None):
    """Relative error of every parameter tensor's gradient (and of the loss).

    Runs in float64 whatever ``config.dtype`` says. Returns ``{name: error}``.
    """
    cfg = replace(config, dtype="float64")
    params = perturb_params(M.init_params(cfg, seed), seed + 1)
    tokens, mask, labels = random_batch(cfg, B, seed + 2)
    key = (seed, 7)

    def loss():
        logits, _ = M.forward(tokens, mask, params, cfg, train=train, dropout_key=key)
        return TR.smoothed_ce_loss(logits, labels, cfg.label_smoothing)[0]

    logits, cache = M.forward(tokens, mask, params, cfg, train=train, dropout_key=key)
    _, gl = TR.smoothed_ce_loss(logits, labels, cfg.label_smoothing)
    analytic = M.backward(gl, cache, params, cfg).named()
    errors = {}
    for name, arr in params.named().items():
        if names is not None and name not in names:
            continue
        errors[name] = rel_error(analytic[name], numeric_grad(loss, arr, h))
    return errors
