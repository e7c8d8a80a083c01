"""Flat key-value configuration with dotted keys and CLI overrides.

Config files are plain text, one ``section.key = value`` assignment per line,
``#`` comments and blank lines allowed. Values stay strings until a typed
getter coerces them; list-valued keys are comma-separated. Override strings
(``--set key=value``) use the same syntax and always win over the file.

The full key table with defaults lives in DEFAULTS below and is documented in
the README. Unknown keys are rejected except under the ``x.`` prefix, which is
reserved for plugin backbones and custom adapters.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

ENV_CONFIG_VAR = "FTICIR_CONFIG"

DEFAULTS: dict[str, str] = {
    # backbone
    "backbone.name": "toy",
    "backbone.d_embed": "32",
    "backbone.d_patch": "48",
    "backbone.m_patches": "16",
    "backbone.d_token": "24",
    "backbone.max_text_len": "77",
    "backbone.input_size": "64",
    "backbone.seed": "7",
    # inversion network
    "inversion.n_attrs": "24",
    "inversion.layers": "3",
    "inversion.heads": "1",
    "inversion.hidden_mult": "4",
    "inversion.dropout": "0.1",
    # attribute filter
    "filter.k": "12",
    "filter.epsilon": "0.05",
    # losses
    "loss.tau": "0.2",
    "loss.lambda_reg": "1.4",
    # optimization
    "train.lr": "4e-5",
    "train.lr_decay_factor": "0.1",
    "train.lr_decay_epoch": "10",
    "train.batch_size": "256",
    "train.epochs": "20",
    "train.max_steps": "0",
    "train.seed": "0",
    "train.weight_decay": "0.01",
    "train.beta1": "0.9",
    "train.beta2": "0.999",
    "train.eps": "1e-8",
    "train.ablations": "",
    "train.checkpoint_every": "1",
    "train.log_every": "1",
    # data and artifact paths (CLI flags override these)
    "data.images": "",
    "data.captions": "",
    "data.index": "",
    "data.checkpoint": "",
    # service
    "service.host": "127.0.0.1",
    "service.port": "8021",
    "service.max_upload_mb": "8",
    "service.cors_origins": "*",
}


def parse_assignment(line: str) -> tuple[str, str]:
    """Split one ``key = value`` assignment, validating the key."""
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    value = value.strip()
    if not key:
        raise ConfigError(f"empty key in {line!r}")
    if key not in DEFAULTS and not key.startswith("x."):
        raise ConfigError(f"unknown config key {key!r}")
    return key, value


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse a config file into a raw key -> string-value dict."""
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            key, value = parse_assignment(stripped)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        raw[key] = value
    return raw


def resolve_config(
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
) -> dict[str, str]:
    """Build the effective config: defaults <- file <- overrides.

    When ``config_path`` is None the FTICIR_CONFIG environment variable is
    consulted; if that is unset too, only defaults and overrides apply.
    """
    merged = dict(DEFAULTS)
    if config_path is None:
        env_path = os.environ.get(ENV_CONFIG_VAR, "")
        config_path = env_path or None
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for item in overrides or []:
        key, value = parse_assignment(item)
        merged[key] = value
    return merged


def _raw(cfg: dict[str, str], key: str) -> str:
    if key in cfg:
        return cfg[key]
    if key in DEFAULTS:
        return DEFAULTS[key]
    raise ConfigError(f"unknown config key {key!r}")


def get_str(cfg: dict[str, str], key: str) -> str:
    return _raw(cfg, key)


def get_int(cfg: dict[str, str], key: str) -> int:
    value = _raw(cfg, key)
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from exc


def get_float(cfg: dict[str, str], key: str) -> float:
    value = _raw(cfg, key)
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key} must be a number, got {value!r}") from exc


def get_bool(cfg: dict[str, str], key: str) -> bool:
    value = _raw(cfg, key).lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be true/false, got {value!r}")


def get_str_list(cfg: dict[str, str], key: str) -> list[str]:
    value = _raw(cfg, key)
    if not value:
        return []
    return [part.strip() for part in value.split(",") if part.strip()]
