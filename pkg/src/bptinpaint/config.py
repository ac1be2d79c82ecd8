"""Flat JSON run configuration.

Keys (defaults in brackets):

seed [0]
    Seeds every stochastic component.
image_size [64], base_width [16], core_blocks [9]
    Generator geometry; ``core_blocks`` is the head's residual block count.
d_base_width [16], d_strided [3]
    Discriminator width and number of stride-2 layers.
batch_size [4], lr0 [2e-4], head_iters [2000], stage_iters [300], stages [3],
alpha_ramp_fraction [0.5]
    Training schedule.
lambda_ppl [10.0], lambda_adv [1.0]
    Loss weights (``lambda_adv`` is the stage-0 value).
conv_type ["dilated" | "original"], ala ["on" | "off"],
recon_loss ["ppl" | "l2"], procedural ["on" | "off"]
    Ablation toggles.
max_holes [3]
    Holes per training mask.
data_dir [$BPTINPAINT_DATA or "data"], out_dir ["runs/default"]
    Paths.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

DATA_ENV = "BPTINPAINT_DATA"

CHOICES = {
    "conv_type": ("dilated", "original"),
    "ala": ("on", "off"),
    "recon_loss": ("ppl", "l2"),
    "procedural": ("on", "off"),
}


class ConfigError(ValueError):
    pass


def _default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data")


@dataclass(frozen=True)
class Config:
    seed: int = 0
    image_size: int = 64
    base_width: int = 16
    core_blocks: int = 9
    d_base_width: int = 16
    d_strided: int = 3
    batch_size: int = 4
    lr0: float = 2e-4
    head_iters: int = 2000
    stage_iters: int = 300
    stages: int = 3
    alpha_ramp_fraction: float = 0.5
    lambda_ppl: float = 10.0
    lambda_adv: float = 1.0
    conv_type: str = "dilated"
    ala: str = "on"
    recon_loss: str = "ppl"
    procedural: str = "on"
    max_holes: int = 3
    data_dir: str = field(default_factory=_default_data_dir)
    out_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                object.__setattr__(self, f.name, float(v))
            elif not isinstance(v, want) or isinstance(v, bool):
                raise ConfigError(f"config key {f.name!r} expects {want.__name__}, got {v!r}")
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        counts = ("image_size", "base_width", "d_base_width", "d_strided", "batch_size", "stage_iters", "max_holes")
        for key in counts:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("head_iters", "stages", "core_blocks"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0 < self.alpha_ramp_fraction <= 1:
            raise ConfigError("alpha_ramp_fraction must be in (0, 1]")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")

    # derived views

    @property
    def dilation(self) -> int:
        return 2 if self.conv_type == "dilated" else 1

    @property
    def ala_enabled(self) -> bool:
        return self.ala == "on"

    @property
    def effective_stages(self) -> int:
        return self.stages if self.procedural == "on" else 0

    @property
    def effective_core_blocks(self) -> int:
        """Direct training builds the final depth up front."""
        return self.core_blocks if self.procedural == "on" else self.core_blocks + self.stages

    @property
    def total_iters(self) -> int:
        return self.head_iters + self.effective_stages * self.stage_iters

    def ablation_tags(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in CHOICES}

    # serialization

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "Config":
        kw = {k: v for k, v in kw.items() if v is not None}
        known = {f.name for f in fields(self)}
        unknown = sorted(set(kw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **kw)


def load_config(path=None, **overrides) -> Config:
    """Defaults, then the file at ``path`` (if any), then non-None overrides."""
    cfg = Config.from_json(Path(path).read_text()) if path else Config()
    return cfg.with_overrides(**overrides)
