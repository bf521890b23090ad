"""Run configuration: presets, YAML files and command-line overrides.

Resolution order is preset < file < overrides, last writer wins. Unknown keys
and ill-typed values are rejected.
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from jointtok.alignment import check_mode
from jointtok.generator import ARConfig
from jointtok.objectives import LossWeights
from jointtok.tokenizer import TokenizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    preset: str = "desk"
    # data
    dataset: str = "synthetic"
    image_size: int = 32
    channels: int = 3
    num_classes: int = 8
    train_size: int = 2048
    val_size: int = 256
    # tokenizer
    patch_size: int = 8
    hidden_dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    latent_dim: int = 16
    num_tokens: int = 16
    codebook_size: int = 64
    temperature: float = 1.0
    # generator
    ar_layers: int = 2
    ar_hidden: int = 64
    ar_heads: int = 4
    # loss weights
    lambda_recon_l2: float = 1.0
    lambda_recon_perc: float = 1.0
    lambda_gan: float = 0.0
    lambda_lecam: float = 0.05
    lambda_reg: float = 1e-3
    lambda_entropy: float = 0.01
    lambda_ntp: float = 0.1
    lambda_apr_l2: float = 1.0
    lambda_apr_perc: float = 1.0
    lambda_sem: float = 1.0
    ntp_backprop: bool = True
    # alignment
    alignment_mode: str = "implicit"
    decoder_align: bool = True
    decoder_align_layer: int = 0
    provider: str = "frozen-random-vit"
    provider_dim: int = 32
    # optimisation
    batch_size: int = 32
    epochs: int = 0
    steps: int = 2000
    lr: float = 1e-3
    lr_min: float = 1e-6
    lr_disc: float = 1e-3
    beta1: float = 0.9
    beta2_tokenizer: float = 0.999
    beta2_ar: float = 0.95
    grad_clip: float = 1.0
    ema_decay: float = 0.99
    nested_dropout: float = 0.5
    class_dropout: float = 0.1
    gan_warmup: float = 0.1
    lecam_ema_decay: float = 0.99
    # auxiliary guidance model
    autoguide: bool = False
    aux_layers: int = 2
    lambda_aux: float = 1.0
    # misc
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 10

    def validate(self) -> TrainConfig:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.image_size % self.patch_size == 0, "image_size must be divisible by patch_size")
        for name in ("image_size", "channels", "num_classes", "patch_size", "hidden_dim", "heads",
                     "enc_layers", "dec_layers", "latent_dim", "num_tokens", "codebook_size",
                     "ar_layers", "ar_hidden", "ar_heads", "batch_size", "train_size", "val_size"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.hidden_dim % self.heads == 0, "hidden_dim must be divisible by heads")
        need(self.ar_hidden % self.ar_heads == 0, "ar_hidden must be divisible by ar_heads")
        need(self.temperature > 0, "temperature must be > 0")
        need(0 <= self.nested_dropout <= 1, "nested_dropout must be in [0, 1]")
        need(0 <= self.class_dropout <= 1, "class_dropout must be in [0, 1]")
        need(0 <= self.gan_warmup <= 1, "gan_warmup must be in [0, 1]")
        need(0 <= self.ema_decay <= 1, "ema_decay must be in [0, 1]")
        need(self.lr > 0 and 0 <= self.lr_min <= self.lr, "need 0 <= lr_min <= lr and lr > 0")
        need(self.steps > 0 or self.epochs > 0, "set steps or epochs")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(0 <= self.decoder_align_layer <= self.dec_layers,
             "decoder_align_layer must be 0 (middle) or in [1, dec_layers]")
        try:
            check_mode(self.alignment_mode, self.num_tokens)
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def torch_dtype(self):
        import torch

        return getattr(torch, self.dtype)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{f.name: getattr(self, f.name) for f in fields(LossWeights)})

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(
            image_size=self.image_size, channels=self.channels, patch_size=self.patch_size,
            hidden_dim=self.hidden_dim, heads=self.heads, enc_layers=self.enc_layers,
            dec_layers=self.dec_layers, num_tokens=self.num_tokens, latent_dim=self.latent_dim,
            decoder_align_layer=self.decoder_align_layer or None,
        )

    def ar_config(self, layers: int | None = None) -> ARConfig:
        return ARConfig(
            vocab_size=self.codebook_size, seq_len=self.num_tokens, num_classes=self.num_classes,
            layers=layers or self.ar_layers, hidden_dim=self.ar_hidden, heads=self.ar_heads,
        )

    def total_steps(self) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * max(self.train_size // self.batch_size, 1)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> TrainConfig:
        return resolve(self.to_dict(), changes)

    def dataset_spec(self):
        from jointtok.data import DatasetSpec

        return DatasetSpec(source=self.dataset, resolution=self.image_size, num_classes=self.num_classes,
                           channels=self.channels, train_size=self.train_size, val_size=self.val_size,
                           seed=self.seed)


_PAPER_COMMON = dict(
    dataset="imagenet", image_size=256, channels=3, num_classes=1000, patch_size=16,
    latent_dim=64, num_tokens=256, codebook_size=4096, temperature=1.0,
    lambda_recon_l2=1.0, lambda_recon_perc=1.0, lambda_gan=0.1, lambda_lecam=0.05,
    lambda_reg=1e-3, lambda_entropy=0.01, lambda_apr_l2=1.0, lambda_apr_perc=1.0, lambda_sem=1.0,
    batch_size=256, epochs=400, steps=0, lr=1e-4, lr_min=1e-6, lr_disc=1e-4, beta1=0.9,
    beta2_tokenizer=0.999, beta2_ar=0.95, ema_decay=0.9999, class_dropout=0.1,
    alignment_mode="implicit", decoder_align=True, provider_dim=1024,
)

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "S": {**_PAPER_COMMON, "hidden_dim": 768, "heads": 12, "enc_layers": 12, "dec_layers": 12,
          "ar_layers": 12, "ar_hidden": 768, "ar_heads": 12, "lambda_ntp": 0.1, "nested_dropout": 0.5},
    "B": {**_PAPER_COMMON, "hidden_dim": 768, "heads": 12, "enc_layers": 12, "dec_layers": 12,
          "ar_layers": 12, "ar_hidden": 1024, "ar_heads": 16, "lambda_ntp": 0.1, "nested_dropout": 0.5},
    "L": {**_PAPER_COMMON, "hidden_dim": 768, "heads": 12, "enc_layers": 12, "dec_layers": 12,
          "ar_layers": 24, "ar_hidden": 1024, "ar_heads": 16, "lambda_ntp": 0.1, "nested_dropout": 0.5},
    "H": {**_PAPER_COMMON, "hidden_dim": 1024, "heads": 16, "enc_layers": 16, "dec_layers": 16,
          "ar_layers": 32, "ar_hidden": 1280, "ar_heads": 20, "lambda_ntp": 0.01, "nested_dropout": 1.0},
}

FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}


def _coerce(key: str, value: Any) -> Any:
    if key not in FIELD_TYPES:
        close = difflib.get_close_matches(key, FIELD_TYPES, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")
    want = FIELD_TYPES[key]
    if isinstance(value, str) and want in (int, float):
        try:
            return want(value)
        except ValueError:
            pass
    if isinstance(value, str) and want is not str:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {key}={value!r}") from exc
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, want) or isinstance(value, bool) and want is not bool:
        raise ConfigError(f"{key} expects {want.__name__}, got {value!r}")
    return value


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """Turn ``key=value`` strings into a mapping."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def resolve(*layers: Mapping[str, Any]) -> TrainConfig:
    """Merge mappings left to right onto the preset named by the last ``preset`` key."""
    merged: dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            merged[key] = _coerce(key, value)
    preset = merged.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {**PRESETS[preset], **merged, "preset": preset}
    return TrainConfig(**values).validate()


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                preset: str | None = None) -> TrainConfig:
    layers: list[Mapping[str, Any]] = []
    if preset is not None:
        layers.append({"preset": preset})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping")
        layers.append(data)
    if overrides:
        layers.append(overrides)
    return resolve(*layers)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
