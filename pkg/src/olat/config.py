"""Run configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

CATEGORIES = ("box", "cylinder", "sphere", "lamp_like", "chair_like")


@dataclass
class TrainConfig:
    # latent space / losses
    d: int = 96
    K: int = 500
    k_degrade: int = 5
    gamma: float = 100.0
    beta: float = 10.0
    lambda_gp: float = 1.0
    fusion_mode: str = "multiply"
    ranking: str = "npair"
    triplet_delta: float = 5.0
    gp_mode: str = "fake"
    enable_point_d: bool = True
    enable_code_d: bool = True
    enable_swap: bool = True
    # optimisation
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 500
    max_steps: int = 0
    d_steps: int = 1
    grad_clip: float = 10.0
    # linear ramp of the generator-side adversarial weight over this many steps (0 = off)
    adv_warmup: int = 0
    ae_lr: float = 1e-4
    ae_epochs: int = 500
    ae_max_steps: int = 0
    init_dc_from_ae: bool = False
    seed: int = 0
    # network shapes
    n_points: int = 2048
    n_out: int = 2048
    n_partial_out: int = 0
    encoder_variant: str = "pointwise_mlp"
    encoder_widths: tuple = (64, 128, 256)
    k_graph: int = 8
    decoder_hidden: tuple = (256, 512)
    # evaluation
    tau: float = 0.01
    # data generation
    data_dir: str = "data"
    categories: tuple = ("chair_like",)
    n_train_partial: int = 50
    n_train_complete: int = 50
    n_eval: int = 20
    raw_points: int = 2048
    partial_mode: str = "halfspace"
    severity_min: float = 0.2
    severity_max: float = 0.5
    # logging
    ckpt_every: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def partial_out(self) -> int:
        return self.n_partial_out or self.n_points

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: 512-point clouds, K=64, short runs."""
        base = dict(n_points=512, n_out=512, K=64, epochs=200, ae_epochs=200, lr=1e-3,
                    ae_lr=1e-3, raw_points=1024, batch_size=8, adv_warmup=300)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        choices = {
            "fusion_mode": ("multiply", "concat", "add"),
            "ranking": ("npair", "triplet", "none"),
            "gp_mode": ("fake", "interpolate"),
            "encoder_variant": ("pointwise_mlp", "edge_graph"),
            "partial_mode": ("halfspace", "viewpoint"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("d", "K", "k_degrade", "batch_size", "n_points", "n_out", "d_steps", "k_graph", "raw_points"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.n_points <= 2 * self.K:
            raise ConfigError(f"n_points={self.n_points} must exceed 2K={2 * self.K}")
        if self.adv_warmup < 0:
            raise ConfigError("adv_warmup must be >= 0")
        if self.lambda_gp < 0 or self.triplet_delta <= 0 or self.tau <= 0:
            raise ConfigError("lambda_gp must be >= 0; triplet_delta and tau > 0")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown categories {sorted(unknown)}")
        if not 0 <= self.severity_min <= self.severity_max <= 0.9:
            raise ConfigError("need 0 <= severity_min <= severity_max <= 0.9")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            pairs.append(line)
        return (base or cls()).with_overrides(pairs)

    def with_overrides(self, pairs) -> "TrainConfig":
        """Apply ``key=value`` strings; unknown keys and bad values raise ConfigError."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for item in pairs:
            key, sep, raw = item.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(key, raw, getattr(self, key))
        return self.replace(**changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key, raw, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def load_config(path, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as fh:
        cfg = TrainConfig.from_text(fh.read(), base=base)
    return cfg.with_overrides(overrides)
