"""Dual encoders and reconstructor: conv stem + pre-norm transformer layers.

The online encoder runs on the masked token grid, the target encoder on the
full signal with the same architecture. Both share one forward
implementation; the target path is evaluated with constant tensors under
no_grad, so no gradient can ever reach the target parameters.

Token layout is channel-major: token index = channel * n_t + window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .errors import ValidationError
from .seeding import TAG_INIT, make_rng
from .tokenize import DEFAULT_MAPPED_CHANNELS, DEFAULT_PATCH_LEN, MaskPattern

INIT_STD = 0.02
INIT_TRUNC = 2.0  # truncate at +/- 2 sigma


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    p_t: int = DEFAULT_PATCH_LEN
    in_channels: int = 8
    mapped_channels: int = DEFAULT_MAPPED_CHANNELS
    n_t: int = 16
    stem_kernel: int = 7

    def __post_init__(self):
        positive = {
            "d": self.d, "heads": self.heads, "mlp_ratio": self.mlp_ratio,
            "p_t": self.p_t, "in_channels": self.in_channels,
            "mapped_channels": self.mapped_channels, "n_t": self.n_t,
            "stem_kernel": self.stem_kernel,
        }
        for name, value in positive.items():
            if not (value > 0):
                raise ValidationError(f"{name} must be positive")
        if self.layers < 0:
            raise ValidationError("layers must be >= 0")
        if self.d % self.heads != 0:
            raise ValidationError("d must be divisible by heads")
        if self.p_t < self.stem_kernel:
            raise ValidationError("patch length must be >= stem kernel width")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d))

    @property
    def conv_positions(self) -> int:
        """Valid conv output positions per patch."""
        return self.p_t - self.stem_kernel + 1

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def n_tokens(self) -> int:
        return self.mapped_channels * self.n_t

    @property
    def segment_samples(self) -> int:
        return self.n_t * self.p_t


class ParamStore:
    """Ordered name -> ndarray map for one encoder's parameters."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self.tensors:
            raise KeyError(f"unknown parameter {name!r}")
        old = self.tensors[name]
        value = np.asarray(value)
        if value.shape != old.shape or value.dtype != old.dtype:
            raise ValidationError(
                f"parameter {name!r} update changed shape/dtype "
                f"({old.shape}/{old.dtype} -> {value.shape}/{value.dtype})")
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.tensors.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    lo, hi = ndtr(-INIT_TRUNC), ndtr(INIT_TRUNC)
    u = rng.random(shape) * (hi - lo) + lo
    return ndtri(u) * std


def init_param_store(cfg: EncoderConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Truncated-normal weights (std 0.02), zero biases, unit LN gains."""
    rng = make_rng(seed, TAG_INIT)
    d, h = cfg.d, cfg.hidden

    def tn(*shape):
        return _truncated_normal(rng, shape, INIT_STD).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    p = {
        "channel_map": tn(cfg.mapped_channels, cfg.in_channels),
        "channel_embed": tn(cfg.mapped_channels, d),
        "mask_token": tn(d),
        "pos_embed": tn(cfg.n_t, d),
        "stem.weight": tn(d, cfg.stem_kernel),
        "stem.pool": tn(d, cfg.conv_positions),
        "stem.bias": zeros(d),
    }
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        p[pre + "ln1.gain"] = ones(d)
        p[pre + "ln1.bias"] = zeros(d)
        p[pre + "attn.wq"] = tn(d, d)
        p[pre + "attn.bq"] = zeros(d)
        p[pre + "attn.wk"] = tn(d, d)
        p[pre + "attn.bk"] = zeros(d)
        p[pre + "attn.wv"] = tn(d, d)
        p[pre + "attn.bv"] = zeros(d)
        p[pre + "attn.wo"] = tn(d, d)
        p[pre + "attn.bo"] = zeros(d)
        p[pre + "ln2.gain"] = ones(d)
        p[pre + "ln2.bias"] = zeros(d)
        p[pre + "mlp.w1"] = tn(d, h)
        p[pre + "mlp.b1"] = zeros(h)
        p[pre + "mlp.w2"] = tn(h, d)
        p[pre + "mlp.b2"] = zeros(d)
    p["final_ln.gain"] = ones(d)
    p["final_ln.bias"] = zeros(d)
    p["recon.weight"] = tn(d, cfg.p_t)
    p["recon.bias"] = zeros(cfg.p_t)
    return ParamStore(p)


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form scalar-parameter count of one encoder (theta only)."""
    d, h = cfg.d, cfg.hidden
    total = cfg.mapped_channels * cfg.in_channels   # channel map
    total += cfg.mapped_channels * d                # channel embedding
    total += d                                      # mask token
    total += cfg.n_t * d                            # positional embedding
    total += d * cfg.stem_kernel + d * cfg.conv_positions + d  # stem
    per_layer = (4 * d                              # two layer norms
                 + 4 * (d * d + d)                  # q, k, v, o projections
                 + (d * h + h) + (h * d + d))       # mlp
    total += cfg.layers * per_layer
    total += 2 * d                                  # final layer norm
    total += d * cfg.p_t + cfg.p_t                  # reconstructor head
    return total


def first_layer_names(cfg: EncoderConfig) -> tuple:
    """Tensors counted as the 'first layer' for gradient statistics."""
    return ("stem.weight", "stem.pool", "stem.bias")


def last_layer_names(cfg: EncoderConfig) -> tuple:
    """Final transformer block plus the reconstructor head."""
    names = []
    if cfg.layers > 0:
        pre = f"layers.{cfg.layers - 1}."
        names.extend(pre + s for s in (
            "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
            "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias",
            "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"))
    names.extend(("recon.weight", "recon.bias"))
    return tuple(names)


def wrap_parameters(store: ParamStore) -> dict:
    """Tensors with gradient tracking, for the online/training path."""
    return {k: ad.parameter(v) for k, v in store.items()}


def wrap_constants(store: ParamStore) -> dict:
    """Plain constant tensors, for target/evaluation forwards."""
    return {k: ad.constant(v) for k, v in store.items()}


def _stem_tokens(patches: ad.Tensor, p: Mapping[str, ad.Tensor],
                 cfg: EncoderConfig) -> ad.Tensor:
    """Valid 1-D conv (d filters, kernel k, stride 1) over each patch, read
    out through a learned pooling:

        token[c] = sum_u pool[c, u] * sum_j w[c, j] * patch[u + j] + bias[c]

    A fixed mean over u would make the token blind to any intra-patch
    oscillation, so the pooling weights are trainable.
    """
    l_out = cfg.conv_positions
    w, pool = p["stem.weight"], p["stem.pool"]
    token = None
    for j in range(cfg.stem_kernel):
        window = ad.slice_last(patches, j, j + l_out)          # (..., L_out)
        tap = ad.reshape(ad.slice_last(w, j, j + 1), (cfg.d,))
        contrib = ad.mul(ad.matmul(window, ad.transpose(pool, (1, 0))), tap)
        token = contrib if token is None else ad.add(token, contrib)
    return ad.add(token, p["stem.bias"])


def _affine_ln(x: ad.Tensor, gain: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def _attention(x: ad.Tensor, p: Mapping[str, ad.Tensor], prefix: str,
               cfg: EncoderConfig) -> ad.Tensor:
    b, n, d = x.shape
    heads, hd = cfg.heads, cfg.head_dim

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    q = split(ad.add(ad.matmul(x, p[prefix + "attn.wq"]), p[prefix + "attn.bq"]))
    k = split(ad.add(ad.matmul(x, p[prefix + "attn.wk"]), p[prefix + "attn.bk"]))
    v = split(ad.add(ad.matmul(x, p[prefix + "attn.wv"]), p[prefix + "attn.bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return ad.add(ad.matmul(mixed, p[prefix + "attn.wo"]), p[prefix + "attn.bo"])


def _mlp(x: ad.Tensor, p: Mapping[str, ad.Tensor], prefix: str) -> ad.Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, p[prefix + "mlp.w1"]), p[prefix + "mlp.b1"]))
    return ad.add(ad.matmul(hidden, p[prefix + "mlp.w2"]), p[prefix + "mlp.b2"])


def forward_tokens(p: Mapping[str, ad.Tensor], x: np.ndarray,
                   mask: Optional[np.ndarray], cfg: EncoderConfig) -> ad.Tensor:
    """Batched encoder forward: (B, M, T) -> token sequence (B, N, d).

    `mask` is a boolean (B, M', n_t) array or None (target path, no masking).
    """
    if x.ndim != 3:
        raise ValidationError("expected a (batch, channels, time) array")
    b, m, t = x.shape
    if m != cfg.in_channels:
        raise ValidationError(f"encoder expects {cfg.in_channels} channels, got {m}")
    if t // cfg.p_t != cfg.n_t:
        raise ValidationError(
            f"segment of {t} samples does not give n_t={cfg.n_t} windows of "
            f"length {cfg.p_t}")
    if mask is not None and mask.shape != (b, cfg.mapped_channels, cfg.n_t):
        raise ValidationError("mask shape does not match the patch grid")

    mp, n_t, p_t, d = cfg.mapped_channels, cfg.n_t, cfg.p_t, cfg.d
    x_const = ad.constant(np.ascontiguousarray(x[:, :, :n_t * p_t]))
    mapped = ad.matmul(p["channel_map"], x_const)              # (B, M', T)
    patches = ad.reshape(mapped, (b, mp, n_t, p_t))

    tokens = _stem_tokens(patches, p, cfg)                     # (B, M', n_t, d)
    if mask is not None:
        tokens = ad.where(mask[..., None], p["mask_token"], tokens)
    tokens = ad.add(tokens, ad.reshape(p["channel_embed"], (mp, 1, d)))
    tokens = ad.add(tokens, p["pos_embed"])                    # (n_t, d) broadcast
    seq = ad.reshape(tokens, (b, mp * n_t, d))

    for i in range(cfg.layers):
        pre = f"layers.{i}."
        normed = _affine_ln(seq, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        seq = ad.add(seq, _attention(normed, p, pre, cfg))
        normed = _affine_ln(seq, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        seq = ad.add(seq, _mlp(normed, p, pre))
    return _affine_ln(seq, p["final_ln.gain"], p["final_ln.bias"])


def predict_patches(p: Mapping[str, ad.Tensor], z: ad.Tensor,
                    cfg: EncoderConfig) -> ad.Tensor:
    """Linear head d -> p_t per token, reshaped to the patch grid."""
    b = z.shape[0]
    pred = ad.add(ad.matmul(z, p["recon.weight"]), p["recon.bias"])
    return ad.reshape(pred, (b, cfg.mapped_channels, cfg.n_t, cfg.p_t))


# --- single-segment public operations --------------------------------------

def encode_online(segment: np.ndarray, store: ParamStore, cfg: EncoderConfig,
                  mask: Union[MaskPattern, np.ndarray]) -> np.ndarray:
    """Masked-input forward through the online encoder; returns (N, d)."""
    mask_arr = mask.mask if isinstance(mask, MaskPattern) else np.asarray(mask, bool)
    segment = np.asarray(segment, dtype=store["channel_map"].dtype)
    with ad.no_grad():
        out = forward_tokens(wrap_constants(store), segment[None],
                             mask_arr[None], cfg)
    return out.data[0]


def encode_target(segment: np.ndarray, store: ParamStore,
                  cfg: EncoderConfig) -> np.ndarray:
    """Full-signal forward through the target encoder; returns (N, d)."""
    segment = np.asarray(segment, dtype=store["channel_map"].dtype)
    with ad.no_grad():
        out = forward_tokens(wrap_constants(store), segment[None], None, cfg)
    return out.data[0]


def reconstruct(z: np.ndarray, store: ParamStore, cfg: EncoderConfig) -> np.ndarray:
    """Patch predictions (M', n_t, p_t) from a token sequence (N, d)."""
    z = np.asarray(z, dtype=store["recon.weight"].dtype)
    if z.shape != (cfg.n_tokens, cfg.d):
        raise ValidationError(
            f"token sequence must have shape ({cfg.n_tokens}, {cfg.d})")
    with ad.no_grad():
        out = predict_patches(wrap_constants(store), ad.constant(z[None]), cfg)
    return out.data[0]
