"""Cross-montage channel mapping, spatio-temporal patching, Bernoulli masking.

Patches are per-channel temporal windows of length p_t; a patch grid is
indexed (mapped channel, time window). Masking happens at patch granularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ValidationError
from .seeding import TAG_MASK, make_rng

DEFAULT_PATCH_LEN = 64  # 250 ms at 256 Hz
DEFAULT_MAPPED_CHANNELS = 32


@dataclass(frozen=True)
class ChannelMap:
    """Trainable map from a dataset montage (M) to the latent montage (M')."""

    weights: np.ndarray  # (M', M)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ValidationError("channel map weights must be 2-D")
        if not np.isfinite(w).all():
            raise ValidationError("channel map weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def target_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def source_channels(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class ChannelEmbedding:
    """Per mapped channel embedding added to every token of that channel."""

    weights: np.ndarray  # (M', d)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ValidationError("channel embedding must be 2-D")
        if not np.isfinite(w).all():
            raise ValidationError("channel embedding must be finite")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class PatchGrid:
    """Per-channel temporal patches, shape (M', n_t, p_t)."""

    patches: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.patches)
        if p.ndim != 3 or p.shape[1] < 1:
            raise ValidationError("patches must have shape (channels, windows, p_t)")
        object.__setattr__(self, "patches", p)

    @property
    def patch_length(self) -> int:
        return self.patches.shape[2]

    @property
    def grid_shape(self) -> tuple:
        return self.patches.shape[:2]


@dataclass(frozen=True)
class MaskPattern:
    """Boolean patch mask (True = masked) plus its sampling parameters."""

    mask: np.ndarray  # (M', n_t) bool
    p_mask: float
    seed: int

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValidationError("mask must be 2-D (channels, windows)")
        object.__setattr__(self, "mask", m)

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def apply_channel_map(x: np.ndarray, cmap: Union[ChannelMap, np.ndarray]) -> np.ndarray:
    """W_c @ x. The channel-embedding term is added at token level instead."""
    w = cmap.weights if isinstance(cmap, ChannelMap) else np.asarray(cmap)
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError("expected a (channels, time) matrix")
    if w.shape[1] != x.shape[0]:
        raise ValidationError(
            f"channel map expects {w.shape[1]} input channels, got {x.shape[0]}")
    return w @ x


def patchify(x: np.ndarray, p_t: int) -> PatchGrid:
    """Split each channel into consecutive length-p_t windows; tail discarded."""
    if p_t <= 0:
        raise ValidationError("patch length must be positive")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError("expected a (channels, time) matrix")
    m, t = x.shape
    if t < p_t:
        raise ValidationError(f"signal of length {t} shorter than one patch ({p_t})")
    n_t = t // p_t
    return PatchGrid(x[:, :n_t * p_t].reshape(m, n_t, p_t).copy())


def unpatchify(grid: PatchGrid) -> np.ndarray:
    m, n_t, p_t = grid.patches.shape
    return grid.patches.reshape(m, n_t * p_t).copy()


def sample_mask(grid_shape: tuple, p_mask: float, seed: int) -> MaskPattern:
    """Independent Bernoulli(p_mask) per patch position; seeded."""
    if not (0.0 <= p_mask <= 1.0):
        raise ValidationError("p_mask must lie in [0, 1]")
    rng = make_rng(seed, TAG_MASK)
    mask = rng.random(tuple(grid_shape)) < p_mask
    return MaskPattern(mask=mask, p_mask=p_mask, seed=seed)
