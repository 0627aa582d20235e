"""Training procedure: dual forward, losses, AdamW + EMA updates, logging.

Each step runs exactly: (1) online forward on the masked input and target
forward on the full input, (2) alignment + masked reconstruction losses,
(3) AdamW update of theta at the scheduled lr/wd, (4) EMA update of xi at
the scheduled momentum. Both teachers come from the target side: alignment
regresses onto the target-encoder tokens, and reconstruction targets are
patches of the signal under the target encoder's channel map. The target
side never produces gradients.

Determinism contract: batch order is a pure function of (seed, epoch), the
patch masks of (seed, step), so a run can resume from any checkpoint and
reproduce the uninterrupted log stream.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .data import (Checkpoint, LCMC_VERSION, MOMENT1_PREFIX, MOMENT2_PREFIX,
                   SegmentBatch, THETA_PREFIX, XI_PREFIX, save_checkpoint)
from .encoder import (EncoderConfig, ParamStore, first_layer_names,
                      forward_tokens, init_param_store, last_layer_names,
                      predict_patches, wrap_constants, wrap_parameters)
from .errors import DivergenceError, ValidationError
from .losses import alignment_loss_t, reconstruction_loss_t
from .optim import (AdamWState, ScheduleConfig, adamw_step, ema_update,
                    init_adamw_state, lr_at, momentum_at, wd_at)
from .seeding import TAG_GRADCHECK, TAG_MASK, TAG_SHUFFLE, make_rng


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig
    schedule: ScheduleConfig = ScheduleConfig()
    batch_size: int = 64          # sized for CPU runs; large-batch setups use 1024
    epochs: int = 20
    p_mask: float = 0.5
    lam: float = 1.0
    seed: int = 0
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every_epochs: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not (0.0 <= self.p_mask <= 1.0):
            raise ValidationError("p_mask must lie in [0, 1]")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.checkpoint_every_epochs < 0:
            raise ValidationError("checkpoint_every_epochs must be >= 0")


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    step: int
    L_A: float
    L_R: float
    L_total: float
    lr: float
    wd: float
    m: float
    g_first_mean: float
    g_last_mean: float
    g_min: float
    g_max: float

    def __post_init__(self):
        values = [self.L_A, self.L_R, self.L_total, self.lr, self.wd, self.m,
                  self.g_first_mean, self.g_last_mean, self.g_min, self.g_max]
        if not all(math.isfinite(v) for v in values):
            raise ValidationError("log record contains non-finite values")
        if self.g_min > self.g_max:
            raise ValidationError("g_min must be <= g_max")

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "step": self.step,
            "L_A": self.L_A, "L_R": self.L_R, "L_total": self.L_total,
            "lr": self.lr, "wd": self.wd, "m": self.m,
            "g_first_mean": self.g_first_mean, "g_last_mean": self.g_last_mean,
            "g_min": self.g_min, "g_max": self.g_max})


@dataclass
class TrainState:
    cfg: TrainConfig
    schedule: ScheduleConfig  # effective: total_epochs/steps_per_epoch resolved
    theta: ParamStore
    xi: ParamStore
    opt: AdamWState


def init_train_state(cfg: TrainConfig, steps_per_epoch: int) -> TrainState:
    schedule = replace(cfg.schedule, total_epochs=cfg.epochs,
                       steps_per_epoch=steps_per_epoch)
    theta = init_param_store(cfg.encoder, cfg.seed)
    xi = theta.copy()  # copy-init makes the EMA contraction exact from step 0
    return TrainState(cfg=cfg, schedule=schedule, theta=theta, xi=xi,
                      opt=init_adamw_state(theta))


def batch_mask(seed: int, step: int, batch: int, grid_shape: tuple,
               p_mask: float) -> np.ndarray:
    """Per-sample Bernoulli patch masks for one step, keyed by (seed, step)."""
    rng = make_rng(seed, TAG_MASK, step)
    return rng.random((batch,) + tuple(grid_shape)) < p_mask


def mapped_patch_targets(w_c: np.ndarray, x: np.ndarray,
                         cfg: EncoderConfig) -> np.ndarray:
    """Reconstruction targets: patches of W_c @ x, shape (B, M', n_t, p_t)."""
    used = cfg.n_t * cfg.p_t
    mapped = w_c @ x[:, :, :used]
    return mapped.reshape(x.shape[0], cfg.mapped_channels, cfg.n_t, cfg.p_t)


def _training_loss(params_t: Mapping[str, ad.Tensor], xi: ParamStore,
                   x: np.ndarray, mask: np.ndarray, cfg: EncoderConfig,
                   lam: float):
    """Traced total loss plus the two component values."""
    z = forward_tokens(params_t, x, mask, cfg)                     # (B, N, d)
    with ad.no_grad():
        h = forward_tokens(wrap_constants(xi), x, None, cfg).data
    loss_align = alignment_loss_t(h, z)
    targets = mapped_patch_targets(xi["channel_map"], x, cfg)
    x_hat = predict_patches(params_t, z, cfg)
    loss_recon = reconstruction_loss_t(x_hat, targets, mask)
    total = ad.add(loss_align, ad.scale(loss_recon, lam))
    return total, float(loss_align.data), float(loss_recon.data)


def _collect_grads(params_t: Mapping[str, ad.Tensor]) -> dict:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params_t.items()}


def grad_stats(grads: Mapping[str, np.ndarray],
               first_names: Sequence[str] = (),
               last_names: Sequence[str] = ()) -> tuple:
    """Per-tensor L2 norms: (first-group mean, last-group mean, min, max)."""
    if not grads:
        raise ValidationError("grad_stats needs at least one gradient tensor")
    norms = {name: float(np.linalg.norm(np.asarray(g).ravel()))
             for name, g in grads.items()}
    first = [norms[n] for n in first_names if n in norms]
    last = [norms[n] for n in last_names if n in norms]
    g_first = float(np.mean(first)) if first else 0.0
    g_last = float(np.mean(last)) if last else 0.0
    return g_first, g_last, min(norms.values()), max(norms.values())


def train_step(batch: Union[SegmentBatch, np.ndarray], state: TrainState,
               t: int) -> TrainLogRecord:
    """One optimization step at global step index t."""
    cfg = state.cfg
    enc = cfg.encoder
    x = batch.segments if isinstance(batch, SegmentBatch) else np.asarray(batch)
    dtype = state.theta["channel_map"].dtype
    x = np.ascontiguousarray(x, dtype=dtype)

    mask = batch_mask(cfg.seed, t, x.shape[0],
                      (enc.mapped_channels, enc.n_t), cfg.p_mask)
    params_t = wrap_parameters(state.theta)
    total_t, loss_align, loss_recon = _training_loss(
        params_t, state.xi, x, mask, enc, cfg.lam)
    total = float(total_t.data)
    if not math.isfinite(total):
        raise DivergenceError(f"loss divergence at step {t}")
    total_t.backward()
    grads = _collect_grads(params_t)

    g_first, g_last, g_min, g_max = grad_stats(
        grads, first_layer_names(enc), last_layer_names(enc))
    lr = lr_at(t, state.schedule)
    wd = wd_at(t, state.schedule)
    m = momentum_at(t, state.schedule)
    adamw_step(state.theta, grads, state.opt, lr, wd)
    ema_update(state.theta, state.xi, m)

    return TrainLogRecord(
        epoch=t // state.schedule.steps_per_epoch, step=t,
        L_A=loss_align, L_R=loss_recon, L_total=total,
        lr=lr, wd=wd, m=m,
        g_first_mean=g_first, g_last_mean=g_last, g_min=g_min, g_max=g_max)


# --- gradient verification ---------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    per_tensor: dict
    max_rel_error: float
    fd_step: float
    coords_per_tensor: int

    def worst(self) -> tuple:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]


def _loss_value(theta: ParamStore, xi: ParamStore, x: np.ndarray,
                mask: np.ndarray, cfg: EncoderConfig, lam: float) -> float:
    with ad.no_grad():
        total, _, _ = _training_loss(wrap_constants(theta), xi, x, mask, cfg, lam)
    return float(total.data)


def analytic_training_grads(theta: ParamStore, xi: ParamStore, x: np.ndarray,
                            mask: np.ndarray, cfg: EncoderConfig,
                            lam: float) -> tuple:
    """(total loss, per-tensor gradients) from the reverse-mode tape."""
    params_t = wrap_parameters(theta)
    total_t, _, _ = _training_loss(params_t, xi, x, mask, cfg, lam)
    total_t.backward()
    return float(total_t.data), _collect_grads(params_t)


def fd_compare(theta: ParamStore, xi: ParamStore, x: np.ndarray,
               mask: np.ndarray, cfg: EncoderConfig, lam: float,
               grads: Mapping[str, np.ndarray], seed: int,
               coords_per_tensor: int = 32, fd_step: float = 1e-5) -> dict:
    """Max relative error per tensor between `grads` and central differences."""
    rng = make_rng(seed, TAG_GRADCHECK, 1)
    errors = {}
    for name in theta.names():
        tensor = theta[name]
        flat = tensor.ravel()
        n_coords = min(coords_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=n_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + fd_step
            plus = _loss_value(theta, xi, x, mask, cfg, lam)
            flat[i] = orig - fd_step
            minus = _loss_value(theta, xi, x, mask, cfg, lam)
            flat[i] = orig
            fd = (plus - minus) / (2.0 * fd_step)
            a = float(np.asarray(grads[name]).ravel()[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-4)
            worst = max(worst, rel)
        errors[name] = worst
    return errors


def grad_check(cfg: EncoderConfig, seed: int = 0, p_mask: float = 0.5,
               lam: float = 1.0, coords_per_tensor: int = 32,
               fd_step: float = 1e-5) -> GradCheckReport:
    """Check every analytic theta gradient against central differences.

    Runs in float64 on one random segment; the finite-difference tolerance is
    unreachable at 32-bit precision.
    """
    theta = init_param_store(cfg, seed, dtype=np.float64)
    xi = init_param_store(cfg, seed + 1, dtype=np.float64)
    rng = make_rng(seed, TAG_GRADCHECK, 0)
    x = rng.standard_normal((1, cfg.in_channels, cfg.segment_samples))
    mask = rng.random((1, cfg.mapped_channels, cfg.n_t)) < p_mask
    # both populations must be non-empty or parts of the loss vanish
    mask[0, 0, 0] = True
    mask[0, -1, -1] = False

    _, grads = analytic_training_grads(theta, xi, x, mask, cfg, lam)
    errors = fd_compare(theta, xi, x, mask, cfg, lam, grads, seed,
                        coords_per_tensor, fd_step)
    return GradCheckReport(per_tensor=errors,
                           max_rel_error=max(errors.values()),
                           fd_step=fd_step, coords_per_tensor=coords_per_tensor)


# --- full pretraining loop ----------------------------------------------------

def make_checkpoint(state: TrainState, step: int) -> Checkpoint:
    tensors = {}
    for name, v in state.theta.items():
        tensors[THETA_PREFIX + name] = v.astype(np.float32)
    for name, v in state.xi.items():
        tensors[XI_PREFIX + name] = v.astype(np.float32)
    for name, v in state.opt.m.items():
        tensors[MOMENT1_PREFIX + name] = v.astype(np.float32)
    for name, v in state.opt.v.items():
        tensors[MOMENT2_PREFIX + name] = v.astype(np.float32)
    return Checkpoint(format_version=LCMC_VERSION, step=step, tensors=tensors)


def restore_train_state(state: TrainState, ckpt: Checkpoint) -> int:
    """Load checkpoint tensors into `state`; returns the step to resume at."""
    groups = {prefix: ckpt.group(prefix) for prefix in
              (THETA_PREFIX, XI_PREFIX, MOMENT1_PREFIX, MOMENT2_PREFIX)}
    expected = set(state.theta.names())
    for prefix, tensors in groups.items():
        if set(tensors) != expected:
            raise ValidationError(
                f"checkpoint group {prefix!r} does not match the configured encoder")
    for name in expected:
        state.theta[name] = groups[THETA_PREFIX][name]
        state.xi[name] = groups[XI_PREFIX][name]
        state.opt.m[name] = groups[MOMENT1_PREFIX][name]
        state.opt.v[name] = groups[MOMENT2_PREFIX][name]
    state.opt.t = ckpt.step
    return ckpt.step


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return make_rng(seed, TAG_SHUFFLE, epoch).permutation(n)


def run_pretraining(cfg: TrainConfig, data: SegmentBatch,
                    resume_from: Optional[Checkpoint] = None) -> tuple:
    """Deterministic pretraining over `data`; returns (Checkpoint, records).

    Writes one JSON line per step to cfg.log_path when set, and checkpoints
    into cfg.checkpoint_dir at the configured epoch cadence plus at the end.
    """
    n = len(data)
    if n == 0:
        raise ValidationError("pretraining data is empty")
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    state = init_train_state(cfg, steps_per_epoch)
    start = 0
    if resume_from is not None:
        start = restore_train_state(state, resume_from)

    total_steps = cfg.epochs * steps_per_epoch
    if start > total_steps:
        raise ValidationError(
            f"checkpoint step {start} beyond configured run of {total_steps} steps")
    if cfg.checkpoint_dir is not None:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_f = open(cfg.log_path, "w") if cfg.log_path else None

    records = []
    perm = None
    try:
        for t in range(start, total_steps):
            epoch, offset = divmod(t, steps_per_epoch)
            if perm is None or offset == 0:
                perm = epoch_order(cfg.seed, epoch, n)
            sel = perm[offset * cfg.batch_size:(offset + 1) * cfg.batch_size]
            record = train_step(data.segments[sel], state, t)
            records.append(record)
            if log_f is not None:
                log_f.write(record.to_json() + "\n")
            done = t + 1
            if (cfg.checkpoint_dir is not None and cfg.checkpoint_every_epochs > 0
                    and done % (cfg.checkpoint_every_epochs * steps_per_epoch) == 0
                    and done < total_steps):
                save_checkpoint(make_checkpoint(state, done),
                                os.path.join(cfg.checkpoint_dir,
                                             f"checkpoint_{done:08d}.lcmc"))
    finally:
        if log_f is not None:
            log_f.close()

    final = make_checkpoint(state, total_steps)
    if cfg.checkpoint_dir is not None:
        save_checkpoint(final, os.path.join(cfg.checkpoint_dir, "final.lcmc"))
    return final, records
