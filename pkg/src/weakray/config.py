"""Flat ``key = value`` configuration files.

Keys are namespaced (``net.growth_rate``, ``head.bottom_weight``,
``train.lr``, ``data.crop``).  The canonical text form (sorted keys, one
per line) is what gets hashed into checkpoints, so identical settings
always produce identical hashes.
"""

from __future__ import annotations

import hashlib

from .data import PreprocessConfig
from .densenet import DenseNetConfig, full_config, toy_config
from .wsl import HeadConfig

__all__ = [
    "ConfigError",
    "parse_config_text",
    "format_config",
    "config_hash",
    "train_config_to_flat",
    "train_config_from_flat",
    "preprocess_from_flat",
    "apply_overrides",
]


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines ('#' starts a comment) into a dict."""
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        flat[key] = value.strip()
    return flat


def apply_overrides(flat: dict, overrides) -> dict:
    """Merge ``key=value`` strings (e.g. from --set flags) over a dict."""
    out = dict(flat)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_config(flat: dict) -> str:
    """Canonical text: sorted keys, one per line."""
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _parse_bool(key, value):
    v = value.lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_tuple(value, cast):
    return tuple(cast(v.strip()) for v in value.split(",") if v.strip())


def preprocess_from_flat(flat: dict) -> PreprocessConfig:
    pp = PreprocessConfig()
    mean, std = pp.mean, pp.std
    resize_to, crop = pp.resize_to, pp.crop
    if "data.mean" in flat:
        vals = _parse_tuple(flat["data.mean"], float)
        mean = vals * 3 if len(vals) == 1 else vals
    if "data.std" in flat:
        vals = _parse_tuple(flat["data.std"], float)
        std = vals * 3 if len(vals) == 1 else vals
    if "data.resize" in flat:
        resize_to = int(flat["data.resize"])
    if "data.crop" in flat:
        crop = int(flat["data.crop"])
    return PreprocessConfig(mean=mean, std=std, resize_to=resize_to, crop=crop)


_NET_FIELDS = {
    "growth_rate": int,
    "init_channels": int,
    "compression": float,
    "dilation_last_block": int,
    "drop_rate": float,
}

_HEAD_FIELDS = {
    "submaps_per_class": int,
    "top_k_train": int,
    "top_k_test": int,
    "bottom_k_test": int,
    "bottom_weight": float,
}

_TRAIN_FIELDS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_decay_factor": float,
    "lr_decay_every": int,
    "optimizer": str,
    "momentum": float,
    "l2_penalty": float,
    "seed": int,
    "dtype": str,
}


def net_config_from_flat(flat: dict) -> DenseNetConfig:
    preset = flat.get("net.preset", "toy")
    if preset == "toy":
        cfg = toy_config()
    elif preset == "full":
        cfg = full_config()
    else:
        raise ConfigError(f"net.preset: unknown preset {preset!r} (toy or full)")
    kwargs = {}
    for name, cast in _NET_FIELDS.items():
        key = f"net.{name}"
        if key in flat:
            kwargs[name] = cast(flat[key])
    if "net.block_sizes" in flat:
        kwargs["block_sizes"] = _parse_tuple(flat["net.block_sizes"], int)
    if "net.use_bottleneck" in flat:
        kwargs["use_bottleneck"] = _parse_bool("net.use_bottleneck", flat["net.use_bottleneck"])
    if "net.adaptive" in flat:
        kwargs["adaptive"] = _parse_bool("net.adaptive", flat["net.adaptive"])
    from dataclasses import replace

    return replace(cfg, **kwargs)


def head_config_from_flat(flat: dict, default_classes) -> HeadConfig:
    names = default_classes
    if "head.class_names" in flat:
        names = _parse_tuple(flat["head.class_names"], str)
    kwargs = {}
    for name, cast in _HEAD_FIELDS.items():
        key = f"head.{name}"
        if key in flat:
            kwargs[name] = cast(flat[key])
    return HeadConfig(tuple(names), **kwargs)


def train_config_from_flat(flat: dict, default_classes=("class_0", "class_1")):
    """Build a TrainConfig (imported lazily to avoid a module cycle)."""
    from .training import TrainConfig

    known_prefixes = ("net.", "head.", "train.", "data.")
    for key in flat:
        if not key.startswith(known_prefixes):
            raise ConfigError(f"unknown config key {key!r}")
    kwargs = {}
    for name, cast in _TRAIN_FIELDS.items():
        key = f"train.{name}"
        if key in flat:
            kwargs[name] = cast(flat[key])
    if "train.invert_class_weights" in flat:
        kwargs["invert_class_weights"] = _parse_bool(
            "train.invert_class_weights", flat["train.invert_class_weights"]
        )
    return TrainConfig(
        net=net_config_from_flat(flat),
        head=head_config_from_flat(flat, default_classes),
        **kwargs,
    )


def train_config_to_flat(config) -> dict:
    """Flatten a TrainConfig back to the canonical key set."""
    net, head = config.net, config.head
    flat = {
        "net.growth_rate": str(net.growth_rate),
        "net.block_sizes": ",".join(str(v) for v in net.block_sizes),
        "net.init_channels": str(net.init_channels),
        "net.compression": repr(net.compression),
        "net.use_bottleneck": str(net.use_bottleneck).lower(),
        "net.dilation_last_block": str(net.dilation_last_block),
        "net.drop_rate": repr(net.drop_rate),
        "net.adaptive": str(net.adaptive).lower(),
        "head.class_names": ",".join(head.class_names),
        "head.submaps_per_class": str(head.submaps_per_class),
        "head.top_k_train": str(head.top_k_train),
        "head.top_k_test": str(head.top_k_test),
        "head.bottom_k_test": str(head.bottom_k_test),
        "head.bottom_weight": repr(head.bottom_weight),
        "train.epochs": str(config.epochs),
        "train.batch_size": str(config.batch_size),
        "train.lr": repr(config.lr),
        "train.lr_decay_factor": repr(config.lr_decay_factor),
        "train.lr_decay_every": str(config.lr_decay_every),
        "train.optimizer": config.optimizer,
        "train.momentum": repr(config.momentum),
        "train.l2_penalty": repr(config.l2_penalty),
        "train.seed": str(config.seed),
        "train.dtype": config.dtype,
        "train.invert_class_weights": str(config.invert_class_weights).lower(),
    }
    return flat
