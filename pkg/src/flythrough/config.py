"""Run configuration: published defaults plus desk-scale overrides.

The published settings (speed 0.1875, EMA 0.9999, lr 1e-4, test FoV 55,
cruise targets 0.25/0.1, orientation lerp 0.05, step range 20, linear betas
(1e-6, 0.01) at 2000 steps) are kept verbatim; resolution, schedule length,
and batch are scaled down so everything runs on one CPU.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    resolution: int = 32
    t_steps: int = 250
    beta_lo: float = 1e-6
    beta_hi: float = 0.01
    batch: int = 8
    max_steps: int = 20000
    lr: float = 1e-4
    warmup: int = 500
    ema_decay: float = 0.9999
    guidance_w: float = 1.0
    dropout_prob: float = 0.1
    speed: float = 0.1875
    tau_sky: float = 0.25
    tau_near: float = 0.1
    tau_lerp: float = 0.05
    fov_deg: float = 55.0
    anchor_interval: int = 5
    lookahead_interval: int = 10
    lookahead_multiplier: float = 10.0
    s_range: float = 20.0
    seed: int = 0

    def validate(self) -> "Config":
        checks = [
            ("resolution", self.resolution >= 8),
            ("t_steps", self.t_steps >= 1),
            ("beta_lo", 0.0 < self.beta_lo <= self.beta_hi),
            ("beta_hi", self.beta_hi < 1.0),
            ("batch", self.batch >= 1),
            ("max_steps", self.max_steps >= 1),
            ("lr", self.lr > 0.0),
            ("warmup", self.warmup >= 0),
            ("ema_decay", 0.0 <= self.ema_decay < 1.0),
            ("guidance_w", self.guidance_w >= 0.0),
            ("dropout_prob", 0.0 <= self.dropout_prob <= 1.0),
            ("speed", self.speed != 0.0),
            ("tau_sky", 0.0 <= self.tau_sky <= 1.0),
            ("tau_near", 0.0 <= self.tau_near <= 1.0),
            ("tau_lerp", 0.0 <= self.tau_lerp <= 1.0),
            ("fov_deg", 0.0 < self.fov_deg < 180.0),
            ("anchor_interval", self.anchor_interval >= 1),
            ("lookahead_interval", self.lookahead_interval >= 1),
            ("lookahead_multiplier", self.lookahead_multiplier >= 1.0),
            ("s_range", self.s_range > 0.0),
        ]
        bad = [name for name, ok in checks if not ok]
        if bad:
            raise ConfigError(f"invalid config value for: {', '.join(bad)}")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(Config)}


def load_config(path=None, overrides: dict = None) -> Config:
    """Defaults, then JSON file values, then explicit overrides."""
    values = {}
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(file_values)
    values.update(overrides or {})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key: {', '.join(sorted(unknown))}")
    cfg = Config(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if kind in ("int", int):
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"config key {key} must be an integer, got {value}")
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


def config_hash(cfg: Config) -> str:
    """Digest of the settings a checkpoint depends on."""
    relevant = {
        "resolution": cfg.resolution,
        "t_steps": cfg.t_steps,
        "beta_lo": cfg.beta_lo,
        "beta_hi": cfg.beta_hi,
    }
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
