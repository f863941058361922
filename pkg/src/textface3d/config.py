"""Configuration dataclasses, file loading and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class EncoderConfig:
    kind: str = "toy"  # toy | external
    external_path: str | None = None
    dim: int = 64
    seed: int = 0


@dataclass
class ModelConfig:
    z_dim: int = 32
    w_dim: int = 128
    mapping_hidden: int = 128
    plane_channels: int = 16
    plane_res: int = 32
    backbone_channels: tuple[int, ...] = (64, 64, 48, 48)
    decoder_hidden: int = 64
    feature_channels: int = 8
    upsampler_channels: int = 32
    disc_channels: tuple[int, ...] = (32, 64, 64)
    disc_feature: int = 128
    camera_conditioning: bool = True
    part_dim: int = 64
    heads: int = 4
    classifier_hidden: int = 128


@dataclass
class RenderConfig:
    neural_res: int = 32
    final_res: int = 32
    n_samples: int = 32
    near_scale: float = 0.5
    far_scale: float = 1.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = True


@dataclass
class PartConfig:
    grid: tuple[int, int] = (2, 2)
    part_res: int = 32
    threshold: float = 0.05
    background_tol: float = 0.05


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_d: float = 0.002
    lr_g: float = 0.0025
    betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 1.0
    tau: float = 0.07
    steps: int = 2000
    blur_sigma0: float = 1.0
    blur_images: int = 2_400
    res_start: int = 16
    res_end: int = 32
    res_images: int = 12_000
    grad_clip: float = 10.0  # global grad-norm cap per phase; 0 disables
    w_gan: float = 1.0
    w_cl: float = 1.0
    w_fg: float = 1.0
    standard_infonce: bool = False
    fg_positive_only: bool = False
    fg_real_parser: str = "region"  # region | truth
    log_every: int = 1
    ckpt_every: int = 500
    seed: int = 0
    fit_judges: bool = True


@dataclass
class GuidanceConfig:
    iters: int = 100
    lr: float = 0.002
    n_poses: int = 4
    style_base: str = "Photo"


@dataclass
class JudgeConfig:
    n_images: int = 1200
    n_identities: int = 300
    views_per_identity: int = 4
    steps: int = 600
    batch_size: int = 32
    lr: float = 0.003
    seed: int = 1234


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    parts: PartConfig = field(default_factory=PartConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    judges: JudgeConfig = field(default_factory=JudgeConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        t = self.train
        positive = {
            "batch_size": t.batch_size, "lr_d": t.lr_d, "lr_g": t.lr_g, "tau": t.tau,
            "res_start": t.res_start, "res_end": t.res_end,
            "blur_images": t.blur_images, "res_images": t.res_images,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"train.{name} must be positive, got {value}")
        if t.steps < 0 or t.r1_gamma < 0 or t.blur_sigma0 < 0 or t.grad_clip < 0:
            raise ValueError("train.steps, train.r1_gamma, train.blur_sigma0 and train.grad_clip must be >= 0")
        if t.res_start > t.res_end:
            raise ValueError("train.res_start must not exceed train.res_end")
        if self.encoder.kind not in ("toy", "external"):
            raise ValueError(f"unknown encoder.kind {self.encoder.kind!r}")


def _build(cls, data: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> Config:
    cfg = _build(Config, data)
    cfg.validate()
    return cfg


def merge(cfg: Config, overrides: dict[str, Any]) -> Config:
    """Return a copy of ``cfg`` with a nested ``overrides`` dict applied."""
    base = cfg.to_dict()

    def _merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                _merge(dst[k], v)
            else:
                dst[k] = v

    _merge(base, overrides)
    return config_from_dict(base)


def load_config(path: str | Path | None) -> Config:
    """Load a JSON or TOML config file; ``None`` gives the defaults."""
    if path is None:
        return Config()
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    # external.path is accepted as a nested table for readability
    enc = data.get("encoder", {})
    if isinstance(enc.get("external"), dict):
        enc["external_path"] = enc.pop("external").get("path")
    return config_from_dict(data)
