"""Training configuration and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec


class ConfigError(ValueError):
    """Malformed config text, unknown key, or unacceptable value."""


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters; defaults follow the published recipe
    where one exists, toy-scale values otherwise."""

    n_stripes: int = 6
    sinkhorn_iters: int = 20
    gumbel_samples: int = 10
    tau: float = 0.07  # contrastive temperature (soft retrieval + PCC loss)
    sinkhorn_tau: float = 1.0  # Gumbel-Sinkhorn relaxation temperature
    lambda_pcc: float = 0.2
    batch_per_modality: int = 8  # published recipe uses 56 per modality
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    grad_clip: float = 5.0  # global grad-norm ceiling; 0 disables
    logit_scale: float = 4.0  # per-image affinity standardization spread; 0 disables
    epochs: int = 30  # published recipe uses 100
    warmup_epochs: int = 10
    triplet_margin: float = 0.3
    crop_padding: int = 4
    hflip_prob: float = 0.5
    seed: int = 0
    max_steps: int = 0  # 0 = no cap
    log_interval: int = 10
    checkpoint_interval: int = 10  # epochs
    finetune_epochs: int = 15
    finetune_warmup_epochs: int = 2
    finetune_lr0: float = 0.02  # 0.1 collapses the small un-normalized net
    p_identities: int = 4
    k_instances: int = 4
    finite_checks: bool = True
    threads: int = 1

    def validate(self) -> None:
        positive = (
            "n_stripes", "sinkhorn_iters", "gumbel_samples", "tau", "lr0",
            "epochs", "warmup_epochs", "log_interval", "checkpoint_interval",
            "finetune_epochs", "p_identities", "k_instances", "threads",
            "batch_per_modality",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sinkhorn_tau <= 0:
            raise ConfigError(f"sinkhorn_tau must be positive, got {self.sinkhorn_tau}")
        if self.lambda_pcc < 0 or self.momentum < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError(
                "lambda_pcc, momentum, weight_decay, and grad_clip must be non-negative"
            )
        if self.batch_per_modality < 2:
            raise ConfigError("batch_per_modality must be >= 2 for the contrastive term")
        if self.k_instances < 2:
            raise ConfigError("k_instances must be >= 2 for batch-hard mining")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")


@dataclass(frozen=True)
class Config:
    train: TrainConfig
    data: DatasetSpec

    def validate(self) -> None:
        self.train.validate()
        self.data.validate()
        if self.train.n_stripes != self.data.n_stripes:
            raise ConfigError("internal: stripe counts diverged")


# Flat config key -> (section, field). n_stripes intentionally feeds both
# sections; dataset_seed maps onto the dataset spec's seed.
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "n_stripes"]
_DATA_KEYS = {
    "num_identities": "num_identities",
    "images_per_identity": "images_per_identity_per_modality",
    "image_height": "image_height",
    "image_width": "image_width",
    "channels": "channels",
    "noise_level": "noise_level",
    "split_ratio": "split_ratio",
    "gain_a": "gain_a",
    "gain_b": "gain_b",
    "dataset_seed": "seed",
}
KEY_ORDER = (
    ["n_stripes"]
    + _TRAIN_KEYS
    + list(_DATA_KEYS)
)


def default_config() -> Config:
    return Config(train=TrainConfig(), data=DatasetSpec())


def _get(cfg: Config, key: str):
    if key == "n_stripes":
        return cfg.train.n_stripes
    if key in _DATA_KEYS:
        return getattr(cfg.data, _DATA_KEYS[key])
    return getattr(cfg.train, key)


def _coerce(key: str, raw: str, target):
    t = type(target)
    try:
        if t is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {t.__name__}") from exc
    raise ConfigError(f"key {key!r} has unsupported type {t.__name__}")


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines ('#' starts a comment; unknown keys are
    rejected) on top of ``base`` (the defaults when omitted)."""
    cfg = base or default_config()
    train_kwargs: dict = {}
    data_kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in KEY_ORDER:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        value = _coerce(key, raw, _get(cfg, key))
        if key == "n_stripes":
            train_kwargs["n_stripes"] = value
            data_kwargs["n_stripes"] = value
        elif key in _DATA_KEYS:
            data_kwargs[_DATA_KEYS[key]] = value
        else:
            train_kwargs[key] = value
    out = Config(
        train=dataclasses.replace(cfg.train, **train_kwargs),
        data=dataclasses.replace(cfg.data, **data_kwargs),
    )
    out.validate()
    return out


def serialize_config(cfg: Config) -> str:
    lines = [f"{key} = {_format(_get(cfg, key))}" for key in KEY_ORDER]
    return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
