"""One HGConv layer with analytic forward and backward passes.

Data flows as ``(B, T, H)`` arrays (a 2-D ``(T, H)`` input is treated as a
batch of one):

    norm -> encode (bind along H) -> global conv along T (+ bias, gelu)
         -> decode (unbind along H) -> GLU -> dropout -> residual

``kind`` selects layer or batch normalization, ``placement`` selects
prenorm (normalize the block input) or postnorm (normalize the block
output before the skip connection).
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics
from .errors import ConfigError, ShapeError, StateError
from .hrr import EPS_INV
from .numerics import irfft, rfft

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PARAM_NAMES = (
    "w_e", "w_c", "w_b", "w_d",
    "w_alpha", "b_alpha", "w_beta", "b_beta",
    "norm_gain", "norm_bias",
)

# names of deliberately broken adjoints; selftest uses this as a negative control
FAULTS = set()


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0


@dataclass
class LayerParams:
    w_e: np.ndarray
    w_c: np.ndarray
    w_b: np.ndarray
    w_d: np.ndarray
    w_alpha: np.ndarray
    b_alpha: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    norm_stats: Optional[BatchNormStats] = field(default=None, compare=False)

    @property
    def feature_dim(self):
        return self.w_e.shape[0]

    @property
    def kernel_dim(self):
        return self.w_c.shape[0]

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def zeros_like(self):
        return LayerParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})


def init_layer(H, K, max_seq_len, rng, dtype=np.float32):
    """Random layer parameters with the variance conventions used throughout."""
    if K > max_seq_len:
        raise ConfigError({"kernel_dim": f"K={K} exceeds max sequence length {max_seq_len}"})
    rng = np.random.default_rng(rng)

    def normal(shape, var):
        return (rng.standard_normal(shape) * np.sqrt(var)).astype(dtype)

    return LayerParams(
        w_e=normal(H, 1.0 / H),
        w_c=normal((K, H), 1.0 / (K * H)),
        w_b=normal(H, 1.0 / H),
        w_d=normal(H, 1.0 / H),
        w_alpha=normal((H, H), 1.0 / H),
        b_alpha=np.zeros(H, dtype),
        w_beta=normal((H, H), 1.0 / H),
        b_beta=np.zeros(H, dtype),
        norm_gain=np.ones(H, dtype),
        norm_bias=np.zeros(H, dtype),
        norm_stats=BatchNormStats(np.zeros(H, dtype), np.ones(H, dtype), 0),
    )


# ---------------------------------------------------------------------------
# encoder / decoder (token-local binding along the feature axis)
# ---------------------------------------------------------------------------

def encode(x, w_e):
    """Bind every token's feature row with the shared filter ``w_e``."""
    H = x.shape[-1]
    if w_e.shape != (H,):
        raise ShapeError(f"encoder filter {w_e.shape} does not match H={H}")
    return irfft(rfft(x, H) * rfft(w_e, H), H, dtype=x.dtype)


def encode_backward(gy, x, w_e):
    H = x.shape[-1]
    G = rfft(gy, H)
    W = rfft(w_e, H)
    if "encode" in FAULTS:
        gx = irfft(G * W, H, dtype=gy.dtype)
    else:
        gx = irfft(G * np.conj(W), H, dtype=gy.dtype)
    X = rfft(x, H)
    gw = irfft((G * np.conj(X)).reshape(-1, G.shape[-1]).sum(axis=0), H, dtype=gy.dtype)
    return gx, gw


def inverse_spectrum(w_d, eps=EPS_INV):
    """Spectrum of the exact inverse of ``w_d`` with near-zero bins clamped.

    Bins with magnitude below ``eps`` are moved to magnitude ``eps`` keeping
    their phase. Returns ``(inv_spec, free)`` where ``free`` is False on the
    clamped bins, which carry no gradient.
    """
    H = w_d.shape[-1]
    W = rfft(w_d, H)
    mag = np.abs(W)
    free = mag >= eps
    if not free.all():
        unit = np.where(mag > 0, W / np.where(mag > 0, mag, 1), 1.0)
        W = np.where(free, W, unit * eps).astype(W.dtype)
    return 1.0 / W, free


def decode(h, w_d, eps=EPS_INV):
    """Unbind every token's feature row with ``w_d`` (exact inverse)."""
    H = h.shape[-1]
    if w_d.shape != (H,):
        raise ShapeError(f"decoder filter {w_d.shape} does not match H={H}")
    V, _ = inverse_spectrum(w_d, eps)
    return irfft(rfft(h, H) * V, H, dtype=h.dtype)


def decode_backward(gz, h, w_d, eps=EPS_INV):
    H = h.shape[-1]
    V, free = inverse_spectrum(w_d, eps)
    G = rfft(gz, H)
    gh = irfft(G * np.conj(V), H, dtype=gz.dtype)
    gv = (G * np.conj(rfft(h, H))).reshape(-1, G.shape[-1]).sum(axis=0)
    # d(1/W) = -dW / W^2; clamped bins are constants
    gw = irfft(-gv * np.conj(V * V) * free, H, dtype=gz.dtype)
    return gh, gw


# ---------------------------------------------------------------------------
# global convolution along the sequence axis
# ---------------------------------------------------------------------------

def _check_kernel(T, w_c):
    if w_c.shape[0] > T:
        raise ConfigError({"kernel_dim": f"K={w_c.shape[0]} exceeds sequence length T={T}"})


def global_conv_pre(y, w_c, w_b):
    """Per-channel circular convolution along T plus the ``y * w_b`` term."""
    T = y.shape[-2]
    _check_kernel(T, w_c)
    conv = irfft(rfft(y, T, axis=-2) * rfft(w_c, T, axis=0), T, axis=-2, dtype=y.dtype)
    conv += y * w_b
    return conv


def global_conv(y, w_c, w_b, activation=True):
    s = global_conv_pre(y, w_c, w_b)
    return numerics.gelu(s) if activation else s


def global_conv_backward(gs, y, w_c, w_b):
    """Adjoint of :func:`global_conv_pre`; ``gs`` is the gradient w.r.t. the sum."""
    T = y.shape[-2]
    K = w_c.shape[0]
    G = rfft(gs, T, axis=-2)
    gy = irfft(G * np.conj(rfft(w_c, T, axis=0)), T, axis=-2, dtype=gs.dtype)
    gy += gs * w_b
    lead = tuple(range(G.ndim - 2))
    cross = (G * np.conj(rfft(y, T, axis=-2))).sum(axis=lead)
    gwc = irfft(cross, T, axis=0, dtype=gs.dtype)[:K]
    gwb = (gs * y).sum(axis=lead + (G.ndim - 2,))
    return gy, np.ascontiguousarray(gwc), gwb


# ---------------------------------------------------------------------------
# GLU
# ---------------------------------------------------------------------------

def glu(z, w_alpha, b_alpha, w_beta, b_beta):
    out, _ = glu_forward(z, w_alpha, b_alpha, w_beta, b_beta)
    return out


def glu_forward(z, w_alpha, b_alpha, w_beta, b_beta):
    H = z.shape[-1]
    if w_alpha.shape[0] != H or w_beta.shape[0] != H:
        raise ShapeError(f"GLU weights {w_alpha.shape}/{w_beta.shape} do not match H={H}")
    a = z @ w_alpha
    a += b_alpha
    sg = z @ w_beta
    sg += b_beta
    sg = numerics.sigmoid(sg)
    return a * sg, (a, sg)


def glu_backward(g, z, a, sg, w_alpha, w_beta):
    H = z.shape[-1]
    ga = g * sg
    gq = g * a
    gq *= sg * (1.0 - sg)
    gz = ga @ w_alpha.T
    gz += gq @ w_beta.T
    zf = z.reshape(-1, H)
    gaf = ga.reshape(-1, ga.shape[-1])
    gqf = gq.reshape(-1, gq.shape[-1])
    return gz, zf.T @ gaf, gaf.sum(axis=0), zf.T @ gqf, gqf.sum(axis=0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def norm(x, kind, gain, bias, train=True, mask=None, stats=None):
    out, _ = norm_forward(x, kind, gain, bias, train, mask, stats)
    return out


def norm_forward(x, kind, gain, bias, train=True, mask=None, stats=None):
    """Layer or batch normalization; returns ``(out, cache)``.

    Batch norm pools statistics over every unmasked ``(b, t)`` position and,
    in train mode, folds them into ``stats`` as running averages.
    """
    if kind == "layer":
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
        xhat = xc * rstd
        return xhat * gain + bias, ("layer", xhat, rstd, None, None)
    if kind != "batch":
        raise ConfigError({"norm_kind": f"unknown norm kind {kind!r}"})
    if x.ndim != 3:
        raise ShapeError(f"batch norm needs (B, T, H) input, got {x.shape}")
    m = np.ones(x.shape[:2], x.dtype) if mask is None else mask.astype(x.dtype)
    if train:
        count = max(float(m.sum()), 1.0)
        mu = np.einsum("bt,bth->h", m, x) / count
        xc = x - mu
        var = np.einsum("bt,bth->h", m, xc * xc) / count
        if stats is not None:
            stats.mean = ((1 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * mu).astype(stats.mean.dtype)
            stats.var = ((1 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * var).astype(stats.var.dtype)
            stats.count += 1
    else:
        if stats is None or stats.count == 0:
            raise StateError("batch norm in eval mode has no accumulated statistics")
        mu, var, count = stats.mean.astype(x.dtype), stats.var.astype(x.dtype), None
        xc = x - mu
    rstd = (1.0 / np.sqrt(var + x.dtype.type(BN_EPS))).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gain + bias, ("batch", xhat, rstd, m if train else None, count)


def norm_backward(g, cache, gain):
    kind, xhat, rstd, m, count = cache
    gxh = g * gain
    red = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=red)
    gbias = g.sum(axis=red)
    if kind == "layer":
        H = g.shape[-1]
        s1 = gxh.sum(axis=-1, keepdims=True)
        s2 = (gxh * xhat).sum(axis=-1, keepdims=True)
        gx = rstd * (gxh - (s1 + xhat * s2) / H)
        return gx, ggain, gbias
    if m is None:
        return gxh * rstd, ggain, gbias
    # statistics only see masked positions, but every position is normalized with them
    s1 = gxh.sum(axis=(0, 1))
    s2 = (gxh * xhat).sum(axis=(0, 1))
    gx = rstd * (gxh - m[..., None] * (s1 + xhat * s2) / count)
    return gx, ggain, gbias


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------

@dataclass
class LayerActivations:
    shape: tuple
    kind: str
    placement: str
    norm_cache: tuple
    y: np.ndarray
    s: np.ndarray
    h: np.ndarray
    z: np.ndarray
    a: np.ndarray
    sg: np.ndarray
    keep: Optional[np.ndarray]
    mask: Optional[np.ndarray]
    x: Optional[np.ndarray] = None
    squeeze: bool = False


def dropout_keep(shape, rate, seeds):
    """Boolean keep-mask; row ``b`` is drawn from its own seed ``seeds[b]``."""
    B, T, H = shape
    keep = np.empty(shape, dtype=bool)
    for b in range(B):
        rng = np.random.default_rng(seeds[b])
        keep[b] = rng.random((T, H), dtype=np.float32) >= rate
    return keep


def layer_forward(x, params, mask=None, *, kind="layer", placement="pre", dropout=0.0,
                  train=False, dropout_seeds=None, eps_inv=EPS_INV):
    """Run one layer; returns ``(out, LayerActivations)``.

    ``mask`` (B, T) marks real tokens; padded positions are kept out of the
    sequence mixing and out of batch-norm statistics. ``dropout_seeds`` gives
    one seed per batch row and is required when ``train`` and ``dropout > 0``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if x.ndim != 3 or x.shape[-1] != params.feature_dim:
        raise ShapeError(f"layer input {x.shape} does not match H={params.feature_dim}")
    if placement not in ("pre", "post"):
        raise ConfigError({"norm_placement": f"unknown placement {placement!r}"})
    mcol = None if mask is None else mask[..., None].astype(x.dtype)

    if placement == "pre":
        n, ncache = norm_forward(x, kind, params.norm_gain, params.norm_bias, train, mask,
                                 params.norm_stats)
        y = encode(n, params.w_e)
        del n
    else:
        ncache = None
        y = encode(x, params.w_e)
    if mcol is not None:
        y *= mcol
    s = global_conv_pre(y, params.w_c, params.w_b)
    h = numerics.gelu(s)
    z = decode(h, params.w_d, eps_inv)
    g, (a, sg) = glu_forward(z, params.w_alpha, params.b_alpha, params.w_beta, params.b_beta)

    keep = None
    if train and dropout > 0:
        if dropout_seeds is None:
            raise StateError("train-mode dropout needs per-row dropout seeds")
        keep = dropout_keep(g.shape, dropout, dropout_seeds)
        g *= keep
        g *= g.dtype.type(1.0 / (1.0 - dropout))

    if placement == "post":
        g, ncache = norm_forward(g, kind, params.norm_gain, params.norm_bias, train, mask,
                                 params.norm_stats)
    out = x + g
    acts = LayerActivations(x.shape, kind, placement, ncache, y, s, h, z, a, sg, keep,
                            mcol, x if placement == "post" else None, squeeze)
    return (out[0] if squeeze else out), acts


def layer_backward(grad_out, acts, params, dropout=0.0, eps_inv=EPS_INV):
    """Gradients of :func:`layer_forward`: ``(grad_in, LayerParams of grads)``."""
    if acts.squeeze and grad_out.ndim == 2:
        grad_out = grad_out[None]
    if grad_out.shape != acts.shape:
        raise StateError(f"stale activation cache: grad {grad_out.shape} vs forward {acts.shape}")
    grads = {}
    g = grad_out
    if acts.placement == "post":
        g, grads["norm_gain"], grads["norm_bias"] = norm_backward(g, acts.norm_cache, params.norm_gain)
    if acts.keep is not None:
        g = g * acts.keep
        g *= g.dtype.type(1.0 / (1.0 - dropout))
    gz, grads["w_alpha"], grads["b_alpha"], grads["w_beta"], grads["b_beta"] = glu_backward(
        g, acts.z, acts.a, acts.sg, params.w_alpha, params.w_beta)
    gh, grads["w_d"] = decode_backward(gz, acts.h, params.w_d, eps_inv)
    del gz
    gs = gh * numerics.gelu_grad(acts.s)
    del gh
    gy, grads["w_c"], grads["w_b"] = global_conv_backward(gs, acts.y, params.w_c, params.w_b)
    del gs
    if acts.mask is not None:
        gy *= acts.mask
    if acts.placement == "pre":
        _, xhat, *_ = acts.norm_cache
        n = xhat * params.norm_gain + params.norm_bias
        gn, grads["w_e"] = encode_backward(gy, n, params.w_e)
        del n, gy
        gx, grads["norm_gain"], grads["norm_bias"] = norm_backward(gn, acts.norm_cache, params.norm_gain)
        gx += grad_out
    else:
        gx, grads["w_e"] = encode_backward(gy, acts.x, params.w_e)
        gx += grad_out
    out = LayerParams(**{k: grads[k].astype(getattr(params, k).dtype, copy=False) for k in PARAM_NAMES})
    return (gx[0] if acts.squeeze else gx), out


def copy_layer(params):
    stats = params.norm_stats
    new_stats = None if stats is None else BatchNormStats(stats.mean.copy(), stats.var.copy(), stats.count)
    return replace(params, norm_stats=new_stats, **{k: v.copy() for k, v in params.arrays().items()})
