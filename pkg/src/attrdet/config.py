"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .pyramid import ConfigError


@dataclass
class Config:
    # model
    scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    projection: str = "res"
    res_blocks: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    encoder_units: int = 6
    heads: int = 8
    msda_points: int = 4
    num_queries: int = 20
    num_decoders: int = 9
    ffn_mult: int = 4
    # loss and optimiser
    aux_loss: bool = True
    points_k: int = 1024
    bce_points: str = "mean"
    lambda_cls_matched: float = 0.4
    lambda_cls_unmatched: float = 0.02
    lr: float = 1e-4
    backbone_lr_mult: float = 0.1
    weight_decay: float = 0.05
    total_steps: int = 2000
    batch_size: int = 2
    augment: bool = True
    save_every: int = 500
    seed: int = 0
    # data
    image_size: int = 96
    min_instances: int = 1
    max_instances: int = 5
    curve_prob: float = 0.3
    small_text_prob: float = 0.3
    # inference
    infer_short_side: int = 640
    conf_thresh: float = 0.5
    keep_largest_component: bool = False
    iou_thresh: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.scales:
            raise ConfigError("scales must not be empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive: {self.scales}")
        if self.bce_points not in ("sum", "mean"):
            raise ConfigError(f"bce_points must be sum or mean, got {self.bce_points!r}")
        if self.projection not in ("lp", "conv", "res"):
            raise ConfigError(f"projection must be lp, conv or res, got {self.projection!r}")
        if not 2 <= self.res_blocks <= 4:
            raise ConfigError(f"res_blocks must be in 2..4, got {self.res_blocks}")
        if self.embed_dim % 4 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by 4 and by heads={self.heads}")
        for name in ("encoder_units", "num_decoders"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.infer_short_side < 0:
            raise ConfigError("infer_short_side must be >= 0 (0 keeps the native size)")
        for name in ("num_queries", "msda_points", "points_k", "total_steps", "batch_size", "save_every", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.conf_thresh <= 1.0:
            raise ConfigError("conf_thresh must be in [0, 1]")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(" ", "").split(",") if x)
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_FIELDS = {f.name: f for f in fields(Config)}


def parse_overrides(pairs: dict[str, str], base: Config | None = None) -> Config:
    base = base or Config()
    changes = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse(key, raw, getattr(base, key))
    return base.replace(**changes)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> Config:
    pairs = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs.update(parse_config_text(text, str(path)))
    pairs.update(overrides or {})
    return parse_overrides(pairs)


def save_config(cfg: Config, path: str | Path):
    Path(path).write_text(cfg.to_text())

