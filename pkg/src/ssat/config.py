"""Flat ``key = value`` configuration files with namespaced keys.

Namespaces: ``train.*`` (TrainConfig), ``attack.*`` (AttackConfig),
``model.*`` (ModelConfig), ``data.*`` and ``experiment.*`` (harness).
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .attack import AttackConfig
from .predictor import ModelConfig
from .training import TrainConfig

# desk-scale benchmark used by the acceptance suite and the README walkthrough
BENCHMARK: dict[str, str] = {
    "data.train_count": "2000",
    "data.test_count": "400",
    "data.monitor_count": "200",
    "data.seed": "11",
    "train.optimizer": "adam",
    "train.pretrain_learning_rate": "0.001",
    "train.learning_rate": "0.0005",
    "train.pretrain_epochs": "20",
    "train.epochs": "5",
    "train.batch_size": "32",
    "experiment.train_attack": "ade",
    "experiment.eval_attacks": "ade,lateral-right,longitudinal-forward",
}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def _coerce(value: str, target_type) -> Any:
    if target_type is bool or target_type == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if target_type in (int, "int"):
        return int(value)
    if target_type in (float, "float", "float | None"):
        return float(value)
    return value


def build(cls, values: Mapping[str, str], prefix: str, **overrides):
    """Instantiate a config dataclass from the ``prefix.*`` keys of ``values``."""
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1 :]
        if name not in names:
            continue
        ftype = names[name].type
        default = names[name].default
        if "None" in str(ftype) and raw.strip() in ("", "None", "none"):
            kwargs[name] = None
        elif isinstance(default, bool) or ftype in ("bool",):
            kwargs[name] = _coerce(raw, bool)
        elif isinstance(default, int) or ftype == "int":
            kwargs[name] = _coerce(raw, int)
        elif isinstance(default, float) or "float" in str(ftype):
            kwargs[name] = _coerce(raw, float)
        else:
            kwargs[name] = raw
    kwargs.update(overrides)
    return cls(**kwargs)


def train_config(values: Mapping[str, str], **overrides) -> TrainConfig:
    return build(TrainConfig, values, "train", **overrides)


def attack_config(values: Mapping[str, str], **overrides) -> AttackConfig:
    return build(AttackConfig, values, "attack", **overrides)


def model_config(values: Mapping[str, str]) -> ModelConfig:
    return build(ModelConfig, values, "model")


def flatten(prefix: str, cfg) -> dict[str, str]:
    return {f"{prefix}.{k}": repr(v) if isinstance(v, float) else str(v) for k, v in dataclasses.asdict(cfg).items()}
