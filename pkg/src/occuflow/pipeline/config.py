"""Run configuration, serialized as JSON field-for-field."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

VARIANTS = ("flow", "vanilla")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    embed_dim: int = 8  # C_e
    channels: int = 32  # C
    patch: int = 4  # P
    heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    n_hist: int = 4  # N_h
    n_future: int = 6  # N_f
    variant: str = "flow"
    warp_channels: int = 16  # C_w, width of the full-resolution warped features
    ffn_mult: int = 2
    groups: int = 4
    pose_scale: float = 1.0
    # optimizer
    base_lr: float = 2e-4
    max_lr: float = 2e-3
    cycle_length: int = 400
    weight_decay: float = 0.01
    max_norm: float = 5.0
    batch_size: int = 1
    epochs: int = 20
    # loss
    lambda_pose: float = 1.0
    ray_tolerance: float = 0.4
    # seeds and schedule
    model_seed: int = 0
    data_seed: int = 0
    teacher_forcing: bool = False
    checkpoint_every: int = 0  # steps; 0 saves only the final checkpoint

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("base_lr", "max_lr", "weight_decay", "max_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_lr < self.base_lr:
            raise ConfigError(f"max_lr {self.max_lr} below base_lr {self.base_lr}")
        for name in ("embed_dim", "channels", "patch", "heads", "n_enc", "n_hist", "n_future",
                     "warp_channels", "ffn_mult", "groups", "cycle_length", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_dec < 0:
            raise ConfigError(f"n_dec must be >= 0, got {self.n_dec}")
        if self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide channels={self.channels}")
        if self.channels % self.groups or self.warp_channels % self.groups:
            raise ConfigError(f"groups={self.groups} must divide channels and warp_channels")
        if self.lambda_pose < 0:
            raise ConfigError(f"lambda_pose must be >= 0, got {self.lambda_pose}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
