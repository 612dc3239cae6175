"""Full HGConv classifier: embedding, stacked layers, masked pooling, head."""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import layer as L
from .errors import ConfigError, DataError, ShapeError

PAD_ID = 256


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the Kaggle malware setup."""

    vocab_size: int = 257
    max_seq_len: int = 4096
    feature_dim: int = 256
    kernel_dim: int = 32
    num_layers: int = 1
    num_classes: int = 9
    dropout: float = 0.1
    norm_kind: str = "layer"
    norm_placement: str = "pre"
    label_smoothing: float = 0.1
    input_mode: str = "tokens"
    dtype: str = "float32"
    eps_inv: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = {}
        for name in ("vocab_size", "max_seq_len", "feature_dim", "kernel_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                problems[name] = "must be a positive integer"
        if self.num_layers < 0:
            problems["num_layers"] = "must be >= 0"
        if self.kernel_dim > self.max_seq_len:
            problems["kernel_dim"] = f"K={self.kernel_dim} exceeds max_seq_len={self.max_seq_len}"
        if not 0.0 <= self.label_smoothing < 1.0:
            problems["label_smoothing"] = "must lie in [0, 1)"
        if not 0.0 <= self.dropout < 1.0:
            problems["dropout"] = "must lie in [0, 1)"
        if self.norm_kind not in ("layer", "batch"):
            problems["norm_kind"] = "must be 'layer' or 'batch'"
        if self.norm_placement not in ("pre", "post"):
            problems["norm_placement"] = "must be 'pre' or 'post'"
        if self.input_mode not in ("tokens", "float"):
            problems["input_mode"] = "must be 'tokens' or 'float'"
        if self.dtype not in ("float32", "float64"):
            problems["dtype"] = "must be 'float32' or 'float64'"
        if problems:
            raise ConfigError(problems)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelParams:
    pos_embed: np.ndarray
    layers: List[L.LayerParams]
    head_w: np.ndarray
    head_b: np.ndarray
    token_embed: Optional[np.ndarray] = None
    input_w: Optional[np.ndarray] = None
    input_b: Optional[np.ndarray] = None

    def named(self):
        """Ordered ``name -> array`` view of every learnable tensor."""
        out = {}
        for name in ("token_embed", "input_w", "input_b", "pos_embed"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        for i, lp in enumerate(self.layers):
            for k, v in lp.arrays().items():
                out[f"layers.{i}.{k}"] = v
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def buffers(self):
        out = {}
        for i, lp in enumerate(self.layers):
            if lp.norm_stats is not None:
                out[f"layers.{i}.bn_mean"] = lp.norm_stats.mean
                out[f"layers.{i}.bn_var"] = lp.norm_stats.var
                out[f"layers.{i}.bn_count"] = np.array([lp.norm_stats.count], dtype=np.int64)
        return out

    def num_parameters(self):
        return sum(int(v.size) for v in self.named().values())

    @classmethod
    def from_named(cls, named, num_layers, buffers=None):
        buffers = buffers or {}
        layers = []
        for i in range(num_layers):
            lp = L.LayerParams(**{k: named[f"layers.{i}.{k}"] for k in L.PARAM_NAMES})
            if f"layers.{i}.bn_mean" in buffers:
                lp.norm_stats = L.BatchNormStats(
                    buffers[f"layers.{i}.bn_mean"], buffers[f"layers.{i}.bn_var"],
                    int(buffers[f"layers.{i}.bn_count"][0]))
            layers.append(lp)
        return cls(
            pos_embed=named["pos_embed"], layers=layers,
            head_w=named["head_w"], head_b=named["head_b"],
            token_embed=named.get("token_embed"),
            input_w=named.get("input_w"), input_b=named.get("input_b"),
        )


def param_shapes(config):
    """Expected shape of every named tensor for ``config``."""
    H, T, K, C = config.feature_dim, config.max_seq_len, config.kernel_dim, config.num_classes
    shapes = {}
    if config.input_mode == "tokens":
        shapes["token_embed"] = (config.vocab_size, H)
    else:
        shapes["input_w"] = (H,)
        shapes["input_b"] = (H,)
    shapes["pos_embed"] = (T, H)
    layer_shapes = {
        "w_e": (H,), "w_c": (K, H), "w_b": (H,), "w_d": (H,),
        "w_alpha": (H, H), "b_alpha": (H,), "w_beta": (H, H), "b_beta": (H,),
        "norm_gain": (H,), "norm_bias": (H,),
    }
    for i in range(config.num_layers):
        for k in L.PARAM_NAMES:
            shapes[f"layers.{i}.{k}"] = layer_shapes[k]
    shapes["head_w"] = (H, C)
    shapes["head_b"] = (C,)
    return shapes


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    H, dt = config.feature_dim, config.np_dtype

    def normal(shape, var):
        return (rng.standard_normal(shape) * np.sqrt(var)).astype(dt)

    token_embed = input_w = input_b = None
    if config.input_mode == "tokens":
        token_embed = normal((config.vocab_size, H), 1.0)
    else:
        input_w = normal(H, 1.0)
        input_b = np.zeros(H, dt)
    pos_embed = normal((config.max_seq_len, H), 1.0 / H)
    layers = [L.init_layer(H, config.kernel_dim, config.max_seq_len, rng, dt)
              for _ in range(config.num_layers)]
    return ModelParams(
        pos_embed=pos_embed, layers=layers,
        head_w=normal((H, config.num_classes), 1.0 / H),
        head_b=np.zeros(config.num_classes, dt),
        token_embed=token_embed, input_w=input_w, input_b=input_b,
    )


def embed(tokens, mask, params):
    """``(token_embed[id] + pos_embed[t]) * mask``; float inputs use an affine map."""
    mask = np.asarray(mask)
    pos = params.pos_embed
    if tokens.ndim != 2 or mask.shape != tokens.shape:
        raise ShapeError(f"tokens {tokens.shape} and mask {mask.shape} must be equal (B, T)")
    T = tokens.shape[1]
    if T > pos.shape[0]:
        raise ShapeError(f"sequence width {T} exceeds max_seq_len {pos.shape[0]}")
    dt = pos.dtype
    if params.token_embed is not None:
        ids = np.asarray(tokens)
        V = params.token_embed.shape[0]
        bad = (ids < 0) | (ids >= V)
        if bad.any():
            b, t = map(int, np.argwhere(bad)[0])
            raise DataError(f"token id {int(ids[b, t])} at position ({b}, {t}) outside vocab of size {V}")
        x = params.token_embed[ids]
    else:
        x = np.asarray(tokens, dtype=dt)[..., None] * params.input_w + params.input_b
    x += pos[:T]
    x *= mask[..., None].astype(dt)
    return x


def pad_to_length(tokens, mask, T):
    """Right-pad a narrower batch to width ``T`` (pad id, mask 0).

    The model always runs at its full length so the circular-convolution
    period never depends on how a batch happens to be padded.
    """
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    if tokens.ndim != 2 or mask.shape != tokens.shape:
        raise ShapeError(f"tokens {tokens.shape} and mask {mask.shape} must be equal (B, T)")
    width = tokens.shape[1]
    if width > T:
        raise ShapeError(f"sequence width {width} exceeds max_seq_len {T}")
    if width == T:
        return tokens, mask
    fill = PAD_ID if tokens.dtype.kind in "iu" else 0
    t2 = np.full((tokens.shape[0], T), fill, dtype=tokens.dtype)
    m2 = np.zeros((tokens.shape[0], T), dtype=mask.dtype)
    t2[:, :width] = tokens
    m2[:, :width] = mask
    return t2, m2


@dataclass
class ForwardCache:
    tokens: np.ndarray
    mask: np.ndarray
    counts: np.ndarray
    pooled: np.ndarray
    layer_acts: list = field(default_factory=list)


def _layer_seeds(dropout_key, layer_index, batch_offset, B):
    return [(*dropout_key, layer_index, batch_offset + b) for b in range(B)]


def forward(tokens, mask, params, config, train=False, dropout_key=(0, 0), batch_offset=0):
    """Return ``(logits, cache)`` for a ``(B, T)`` batch.

    ``dropout_key`` plus the row's global index in the step seeds each row's
    dropout mask, so splitting a batch across workers reproduces the same
    masks as processing it whole.
    """
    tokens, mask = pad_to_length(tokens, mask, config.max_seq_len)
    B = tokens.shape[0]
    x = embed(tokens, mask, params)
    acts = []
    for i, lp in enumerate(params.layers):
        seeds = _layer_seeds(dropout_key, i, batch_offset, B) if train and config.dropout > 0 else None
        x, a = L.layer_forward(
            x, lp, mask, kind=config.norm_kind, placement=config.norm_placement,
            dropout=config.dropout, train=train, dropout_seeds=seeds, eps_inv=config.eps_inv)
        acts.append(a)
    m = mask.astype(x.dtype)
    counts = np.maximum(m.sum(axis=1), 1.0)
    pooled = np.einsum("bt,bth->bh", m, x) / counts[:, None]
    logits = pooled @ params.head_w + params.head_b
    return logits, ForwardCache(tokens, mask, counts, pooled, acts)


def backward(grad_logits, cache, params, config):
    """Gradients of every parameter, returned as a :class:`ModelParams`."""
    if grad_logits.shape != (cache.pooled.shape[0], params.head_w.shape[1]):
        raise ShapeError(f"grad_logits {grad_logits.shape} does not match forward cache")
    if len(cache.layer_acts) != len(params.layers):
        raise ShapeError("forward cache was produced by a different layer stack")
    dt = params.head_w.dtype
    grad_logits = grad_logits.astype(dt, copy=False)
    g_head_w = cache.pooled.T @ grad_logits
    g_head_b = grad_logits.sum(axis=0)
    gp = grad_logits @ params.head_w.T
    m = cache.mask.astype(dt)
    gx = (m / cache.counts[:, None])[..., None] * gp[:, None, :]
    layer_grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        gx, layer_grads[i] = L.layer_backward(gx, cache.layer_acts[i], params.layers[i],
                                              config.dropout, config.eps_inv)
    gx *= m[..., None]
    B, T, H = gx.shape
    g_pos = np.zeros_like(params.pos_embed)
    g_pos[:T] = gx.sum(axis=0)
    g_tok = g_in_w = g_in_b = None
    if params.token_embed is not None:
        V = params.token_embed.shape[0]
        flat = (cache.tokens.reshape(-1, 1).astype(np.int64) * H + np.arange(H)).ravel()
        g_tok = np.bincount(flat, weights=gx.reshape(-1), minlength=V * H).reshape(V, H).astype(dt)
    else:
        vals = cache.tokens.astype(dt)
        g_in_w = np.einsum("bt,bth->h", vals, gx)
        g_in_b = gx.sum(axis=(0, 1))
    return ModelParams(pos_embed=g_pos, layers=layer_grads, head_w=g_head_w, head_b=g_head_b,
                       token_embed=g_tok, input_w=g_in_w, input_b=g_in_b)


def predict(tokens, mask, params, config, batch_size=64):
    """Eval-mode logits, processed in fixed-size chunks."""
    out = []
    for s in range(0, len(tokens), batch_size):
        logits, _ = forward(tokens[s:s + batch_size], mask[s:s + batch_size], params, config)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes), config.np_dtype)
