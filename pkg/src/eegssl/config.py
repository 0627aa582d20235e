"""Run configuration: one JSON file mirroring the module configs.

Layout (all keys optional, defaults are the module defaults):

    {
      "seed": 0,
      "synth":    {"channel_count": 8, "duration_s": 4.0, "sample_rate_hz": 256.0,
                   "background_exponent": 1.0, "oscillations": [[10.0, 1.0, [0]]],
                   "scale_to_mV": 1.0},
      "preproc":  {"target_rate_hz": 256.0, "segment_s": 4.0, "lowpass_hz": 38.0,
                   "apply_bandpass": true, "channel_selection": null},
      "encoder":  {"d": 64, "layers": 4, "heads": 4, "mlp_ratio": 4.0, "p_t": 64,
                   "in_channels": 8, "mapped_channels": 32, "n_t": 16,
                   "stem_kernel": 7},
      "schedule": {"lr_max": 1.5e-4, "lr_final": 1e-6, "warmup_epochs": 10,
                   "decay_exponent": 1.0, "mode": "warmup-cosine",
                   "wd_init": 0.05, "wd_final": 0.05,
                   "m_low": 0.996, "m_high": 1.0},
      "train":    {"batch_size": 64, "epochs": 20, "p_mask": 0.5, "lambda": 1.0,
                   "log_path": null, "checkpoint_dir": null,
                   "checkpoint_every_epochs": 0},
      "probe":    {"epochs": 500, "lr": 0.5, "train_fraction": 0.5}
    }

Unknown keys are rejected. The single top-level seed drives every random
stream; schedule total_epochs / steps_per_epoch are derived from the training
run and therefore rejected here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union

from .encoder import EncoderConfig
from .errors import FormatError, ValidationError
from .optim import ScheduleConfig
from .preprocess import PreprocConfig
from .synth import SynthSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class SynthSection:
    channel_count: int = 8
    duration_s: float = 4.0
    sample_rate_hz: float = 256.0
    background_exponent: Optional[float] = 1.0
    oscillations: tuple = ()
    scale_to_mV: float = 1.0

    def spec(self, seed: int) -> SynthSpec:
        oscs = tuple(
            (float(f), float(a), None if ch is None else tuple(ch))
            for f, a, ch in (tuple(o) for o in self.oscillations))
        return SynthSpec(seed=seed, channel_count=self.channel_count,
                         duration_s=self.duration_s,
                         sample_rate_hz=self.sample_rate_hz,
                         background_exponent=self.background_exponent,
                         oscillations=oscs)


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 64
    epochs: int = 20
    p_mask: float = 0.5
    lam: float = 1.0
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if not (0.0 <= self.p_mask <= 1.0):
            raise ValidationError("p_mask must lie in [0, 1]")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.checkpoint_every_epochs < 0:
            raise ValidationError("checkpoint_every_epochs must be >= 0")


@dataclass(frozen=True)
class ProbeSection:
    epochs: int = 500
    lr: float = 0.5
    train_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValidationError("train_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise ValidationError("probe epochs must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSection = SynthSection()
    preproc: PreprocConfig = PreprocConfig()
    encoder: EncoderConfig = EncoderConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainSection = TrainSection()
    probe: ProbeSection = ProbeSection()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            encoder=self.encoder, schedule=self.schedule,
            batch_size=self.train.batch_size, epochs=self.train.epochs,
            p_mask=self.train.p_mask, lam=self.train.lam, seed=self.seed,
            log_path=self.train.log_path,
            checkpoint_dir=self.train.checkpoint_dir,
            checkpoint_every_epochs=self.train.checkpoint_every_epochs)


_KEY_ALIASES = {"train": {"lambda": "lam"}}
_REJECTED = {"schedule": {"total_epochs", "steps_per_epoch"}}
_SECTIONS = {
    "synth": SynthSection,
    "preproc": PreprocConfig,
    "encoder": EncoderConfig,
    "schedule": ScheduleConfig,
    "train": TrainSection,
    "probe": ProbeSection,
}


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - _REJECTED.get(name, set())
    aliases = _KEY_ALIASES.get(name, {})
    kwargs = {}
    for key, value in payload.items():
        target = aliases.get(key, key)
        if target not in allowed:
            raise ValidationError(f"unknown key {key!r} in config section {name!r}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[target] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a JSON object")
    known = set(_SECTIONS) | {"seed"}
    for key in raw:
        if key not in known:
            raise ValidationError(f"unknown top-level config key {key!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(name, cls, raw.get(name, {}))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ValidationError("seed must be an integer")
    return RunConfig(seed=seed, **sections)


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Parse the config file; a missing path gives all-default config."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError("json", f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, *, seed=None, epochs=None, batch_size=None,
                    p_mask=None, lam=None, lr_mode=None) -> RunConfig:
    """Flag overrides win over file values."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    train_updates = {}
    if epochs is not None:
        train_updates["epochs"] = epochs
    if batch_size is not None:
        train_updates["batch_size"] = batch_size
    if p_mask is not None:
        train_updates["p_mask"] = p_mask
    if lam is not None:
        train_updates["lam"] = lam
    if train_updates:
        cfg = replace(cfg, train=replace(cfg.train, **train_updates))
    if lr_mode is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, mode=lr_mode))
    return cfg
