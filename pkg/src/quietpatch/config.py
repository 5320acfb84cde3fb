"""Config files for training runs: YAML in, validated TrainConfig out, with
flag overrides taking precedence over file values over defaults.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .losses import LossError, LossWeights
from .training import TrainConfig, TrainingError


class ConfigError(ValueError):
    """Names the offending key and the expected type."""


# key -> (python type, doc line); weights.* handled separately
CONFIG_KEYS = {
    "epochs_per_scale": (int, "training epochs at every scale"),
    "s_d": (int, "critic steps per epoch"),
    "s_g": (int, "generator steps per epoch"),
    "learning_rate": (float, "Adam learning rate for both networks"),
    "betas": (list, "Adam momentum pair, e.g. [0.5, 0.999]"),
    "K": (int, "finest scale index; K+1 scales total"),
    "coarse_ratio": (float, "coarsest side / original side, in (0,1)"),
    "seed": (int, "master seed; all randomness derives from it"),
    "targeted": (bool, "drive toward target_class instead of away from truth"),
    "target_class": (int, "target label for targeted mode"),
    "patch_h": (int, "patch height in pixels"),
    "patch_w": (int, "patch width in pixels"),
    "context_scale": (float, "context side / patch side"),
    "gan_mode": (str, "wgan-gp or vanilla"),
    "noise_amp_scale": (float, "finer-scale noise amplitude factor"),
    "width": (int, "conv channel width of generator/critic"),
    "min_context_side": (int, "smallest context the critic accepts"),
    "augment_real": (bool, "flip-augment the real patch for the critic"),
    "palette_path": (str, "printable palette file; default ships in-package"),
}

WEIGHT_KEYS = {
    "alpha": "GAN term weight",
    "beta": "reconstruction term weight",
    "gamma": "total variation term weight",
    "delta_print": "printability term weight (0 disables)",
    "kappa": "attack margin",
    "gp_coef": "gradient penalty coefficient",
}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping, got {type(data).__name__}")
    return data


def _coerce(key: str, value, expected: type):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"key {key!r} expects int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(
            f"key {key!r} expects {expected.__name__}, got {type(value).__name__} ({value!r})"
        )
    return value


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """defaults < file < explicit overrides, every key validated by name."""
    merged: dict = {}
    weights: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key == "weights":
                if not isinstance(value, dict):
                    raise ConfigError("key 'weights' expects a mapping of weight names")
                for wk, wv in value.items():
                    if wk not in WEIGHT_KEYS:
                        raise ConfigError(
                            f"unknown weight key {wk!r}; known: {sorted(WEIGHT_KEYS)}"
                        )
                    weights[wk] = _coerce(f"weights.{wk}", wv, float)
            elif key in CONFIG_KEYS:
                merged[key] = _coerce(key, value, CONFIG_KEYS[key][0])
            else:
                raise ConfigError(f"unknown config key {key!r}; known: {sorted(CONFIG_KEYS)}")
    if "betas" in merged:
        b = merged["betas"]
        if len(b) != 2:
            raise ConfigError("key 'betas' expects exactly two numbers")
        merged["betas"] = (float(b[0]), float(b[1]))
    try:
        if weights:
            merged["weights"] = LossWeights(**weights)
        return TrainConfig(**merged)
    except (TrainingError, LossError, TypeError) as e:
        raise ConfigError(str(e)) from e


def describe_keys() -> str:
    lines = ["training config keys:"]
    for key, (typ, doc) in CONFIG_KEYS.items():
        lines.append(f"  {key} ({typ.__name__}): {doc}")
    lines.append("  weights (mapping):")
    for wk, doc in WEIGHT_KEYS.items():
        lines.append(f"    {wk} (float): {doc}")
    return "\n".join(lines)
