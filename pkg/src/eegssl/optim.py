"""AdamW, learning-rate / weight-decay / momentum schedules, EMA update.

Two learning-rate modes:
  warmup-cosine (default): linear 0 -> lr_max over the warmup steps, then a
  cosine from lr_max down to lr_final. This carries the operative
  hyperparameters (1.5e-4 peak, 10 warmup epochs, 1e-6 floor).
  polynomial: lr_max * (1 - t/T)^p.

Weight decay follows the cosine form
  w_t = w_init + (w_final - w_init) * (1 + cos(t*pi/T)) / 2,
which starts at w_final and ends at w_init; with the default
w_init == w_final == 0.05 it is constant.

EMA momentum ramps m_low -> m_high on a half-cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .encoder import ParamStore
from .errors import DivergenceError, ValidationError

MODE_WARMUP_COSINE = "warmup-cosine"
MODE_POLYNOMIAL = "polynomial"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1.5e-4
    lr_final: float = 1e-6
    warmup_epochs: int = 10
    total_epochs: int = 200
    steps_per_epoch: int = 1
    decay_exponent: float = 1.0
    mode: str = MODE_WARMUP_COSINE
    wd_init: float = 0.05
    wd_final: float = 0.05
    m_low: float = 0.996
    m_high: float = 1.0

    def __post_init__(self):
        if not (0 < self.lr_final <= self.lr_max):
            raise ValidationError("need 0 < lr_final <= lr_max")
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ValidationError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch < 1:
            raise ValidationError("steps_per_epoch must be >= 1")
        if self.mode not in (MODE_WARMUP_COSINE, MODE_POLYNOMIAL):
            raise ValidationError(f"unknown schedule mode {self.mode!r}")
        if not (0.9 <= self.m_low <= self.m_high <= 1.0):
            raise ValidationError("need 0.9 <= m_low <= m_high <= 1")
        if self.wd_init < 0 or self.wd_final < 0:
            raise ValidationError("weight decay must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def _check_step(t: int, cfg: ScheduleConfig):
    if t < 0 or t > cfg.total_steps:
        raise ValidationError(f"step {t} outside [0, {cfg.total_steps}]")


def lr_at(t: int, cfg: ScheduleConfig) -> float:
    """Learning rate at step t (pure function of (t, cfg))."""
    _check_step(t, cfg)
    total = cfg.total_steps
    if cfg.mode == MODE_POLYNOMIAL:
        return cfg.lr_max * (1.0 - t / total) ** cfg.decay_exponent
    warmup = cfg.warmup_steps
    if t < warmup:
        return cfg.lr_max * t / warmup
    s = (t - warmup) / (total - warmup)
    return cfg.lr_final + 0.5 * (cfg.lr_max - cfg.lr_final) * (1.0 + math.cos(math.pi * s))


def wd_at(t: int, cfg: ScheduleConfig) -> float:
    """Cosine weight decay: w_final at t=0 down to w_init at t=T."""
    return cfg.wd_init + 0.5 * (cfg.wd_final - cfg.wd_init) * (
        1.0 + math.cos(math.pi * t / cfg.total_steps))


def momentum_at(t: int, cfg: ScheduleConfig) -> float:
    """EMA momentum: half-cosine ramp m_low -> m_high, monotone non-decreasing."""
    return cfg.m_low + 0.5 * (cfg.m_high - cfg.m_low) * (
        1.0 - math.cos(math.pi * t / cfg.total_steps))


@dataclass
class AdamWState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adamw_state(store: ParamStore) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(v) for k, v in store.items()},
        v={k: np.zeros_like(v) for k, v in store.items()})


_NO_DECAY_LEAVES = {"bias", "gain", "bq", "bk", "bv", "bo", "b1", "b2"}


def default_decay_exempt(name: str) -> bool:
    """Layer norms, biases, the channel embedding and the mask token skip decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in _NO_DECAY_LEAVES or name in ("channel_embed", "mask_token")


def adamw_step(params: ParamStore, grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float, wd: float,
               exempt: Callable[[str], bool] = default_decay_exempt) -> None:
    """One bias-corrected AdamW update, decoupled weight decay, in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params.names():
        g = np.asarray(grads[name])
        if not np.isfinite(g).all():
            raise DivergenceError(f"gradient overflow at tensor {name}")
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if wd != 0.0 and not exempt(name):
            update = update + wd * params[name]
        params[name] = params[name] - lr * update


def ema_update(theta: ParamStore, xi: ParamStore, m: float) -> None:
    """xi <- m*xi + (1-m)*theta, elementwise on every tensor, in place.

    Written in delta form so theta == xi is an exact fixed point; m == 1.0
    short-circuits so xi stays bitwise untouched.
    """
    if not (0.0 <= m <= 1.0):
        raise ValidationError("momentum must lie in [0, 1]")
    if m == 1.0:
        return
    for name in xi.names():
        if theta[name].shape != xi[name].shape:
            raise ValidationError(f"theta/xi shape mismatch for {name!r}")
        xi[name] = xi[name] + (1.0 - m) * (theta[name] - xi[name])
