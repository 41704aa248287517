"""Flat key=value run configuration shared by the CLI and the demos.

A config file is UTF-8 text with one ``key = value`` pair per line and ``#``
comments. Unknown keys are rejected; command-line overrides win over file
values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .dvae import DvaeConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import OptimizerConfig, StageSchedule


@dataclass
class RunConfig:
    seed: int = 0
    views: int = 1
    resize_size: int = 128
    crop_size: int = 112
    downsample: int = 8
    # model
    width: int = 48
    heads: int = 2
    layers: int = 3
    ffn_width: int = 96
    dropout: float = 0.1
    max_text_len: int = 48
    max_visual_len: int = 0          # 0 = derive from crop/downsample/views
    mask_scale: float = 1000.0
    basis_rows: int = 2048
    margin: float = 0.2
    use_lsu: bool = True
    use_cra: bool = True
    use_tir: bool = True
    # dVAE
    codebook_size: int = 512
    dvae_code_dim: int = 0           # 0 = same as width
    dvae_steps: int = 1500
    dvae_lr: float = 2e-3
    dvae_batch: int = 16
    temp_start: float = 1.0
    temp_end: float = 0.0625
    # text
    min_count: int = 3
    # optimization
    stage1_epochs: int = 15
    stage2_epochs: int = 15
    lambda_global: float = 1.0
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    stage2_lr_mult: float = 0.5
    warmup_steps: int = 50

    def validate(self) -> None:
        if self.views not in (1, 2):
            raise ConfigError("views must be 1 or 2")
        if self.crop_size % self.downsample:
            raise ConfigError("crop_size must be divisible by downsample")
        if self.crop_size > self.resize_size:
            raise ConfigError("crop_size must not exceed resize_size")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if not self.use_lsu and self.views != 1:
            raise ConfigError("conv-encoder baseline supports a single view")

    def visual_len(self) -> int:
        if self.max_visual_len:
            return self.max_visual_len
        per_view = (self.crop_size // self.downsample) ** 2
        return per_view * self.views

    def token_grid(self) -> tuple[int, int]:
        g = self.crop_size // self.downsample
        return g, g

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            width=self.width,
            heads=self.heads,
            layers=self.layers,
            ffn_width=self.ffn_width,
            dropout=self.dropout,
            max_text_len=self.max_text_len,
            max_visual_len=self.visual_len(),
            mask_scale=self.mask_scale,
            codebook_size=self.codebook_size,
            basis_rows=self.basis_rows,
            basis_seed=self.seed + 1,
            margin=self.margin,
            use_discrete_tokens=self.use_lsu,
            use_aligner=self.use_cra,
            use_mask=self.use_tir,
            image_channels=1,
            conv_downsample=self.downsample,
        )

    def dvae_config(self) -> DvaeConfig:
        return DvaeConfig(
            codebook_size=self.codebook_size,
            code_dim=self.dvae_code_dim or self.width,
            channels=1,
            downsample=self.downsample,
            steps=self.dvae_steps,
            lr=self.dvae_lr,
            batch_size=self.dvae_batch,
            temp_start=self.temp_start,
            temp_end=self.temp_end,
            seed=self.seed + 2,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            batch_size=self.batch_size,
            seed=self.seed,
            stage2_lr_multiplier=self.stage2_lr_mult,
            warmup_steps=self.warmup_steps,
        )

    def schedule(self) -> StageSchedule:
        sched = StageSchedule.default_two_stage(
            self.stage1_epochs, self.stage2_epochs, lambda_global=self.lambda_global
        )
        if not self.use_tir:
            for stage in sched.stages:
                stage.lambda_mask = 0.0
                stage.mask_enabled = False
        return sched


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse boolean from {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def parse_overrides(pairs: list[str]) -> dict:
    """Parse ``key=value`` strings; unknown keys raise ConfigError."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_run_config(
    path: str | Path | None = None, overrides: dict | None = None
) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    if overrides:
        values.update(overrides)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
