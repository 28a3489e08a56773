"""Run configuration: a YAML tree with sections, overrides, and a digest.

Merge order is defaults < file < environment < --set, so the digest is a
hash of the *effective* tree: two runs with the same effective settings
share a digest however those settings were supplied. Every artifact
(dataset sidecar, checkpoint manifest, metrics/bench files) embeds the
digest, and evaluate refuses mismatched artifact pairs unless forced.

Environment overrides use the KFATT_ prefix with ``__`` as the section
separator, e.g. KFATT_MODEL__KERNEL=kfatt_freq equals
``--set model.kernel=kfatt_freq``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .datagen import GenConfig
from .model import ModelConfig

__all__ = [
    "ConfigError",
    "TrainConfig",
    "Paths",
    "RunConfig",
    "ENV_PREFIX",
    "default_tree",
    "load_config",
    "tree_digest",
    "example_yaml",
]

ENV_PREFIX = "KFATT_"


class ConfigError(Exception):
    """Invalid configuration; ``fields`` names every offending key."""

    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__("invalid config: " + "; ".join(fields))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 2
    batch_size: int = 32

    def __post_init__(self):
        bad = []
        if self.lr <= 0:
            bad.append("lr must be > 0")
        if self.epochs < 1:
            bad.append("epochs must be >= 1")
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if bad:
            raise ValueError("; ".join(bad))


@dataclass(frozen=True)
class Paths:
    dataset: str = "artifacts/dataset.tsv"
    checkpoint: str = "artifacts/model.ckpt"
    metrics: str = "artifacts/metrics.tsv"
    bench: str = "artifacts/bench.tsv"
    loss_log: str = "artifacts/loss.tsv"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    datagen: GenConfig
    model: ModelConfig
    train: TrainConfig
    paths: Paths
    digest: str


def _section_defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def default_tree() -> dict:
    """Full defaults. The model's vocabulary sizes are not configuration;
    they come from the dataset sidecar at train/evaluate time."""
    model = _section_defaults(ModelConfig)
    model.pop("n_queries")
    model.pop("n_items")
    return {
        "seed": 0,
        "datagen": _section_defaults(GenConfig),
        "model": model,
        "train": _section_defaults(TrainConfig),
        "paths": _section_defaults(Paths),
    }


def tree_digest(tree: dict) -> str:
    """sha256 of the canonical JSON form of the effective tree."""
    canonical = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _set_path(tree: dict, dotted: str, value, errors: list[str]) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            errors.append(f"unknown config section {dotted!r}")
            return
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        errors.append(f"unknown config key {dotted!r}")
        return
    node[parts[-1]] = value


def _env_overrides(env) -> list[tuple[str, str]]:
    out = []
    for key, value in sorted(env.items()):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            out.append((dotted, value))
    return out


def load_config(path, overrides: tuple[str, ...] = (), env=None) -> RunConfig:
    """Parse, merge, validate. Raises ConfigError naming each bad field."""
    tree = default_tree()
    errors: list[str] = []

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config file: {exc}"]) from exc
    try:
        loaded = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"config is not valid YAML: {exc}"]) from exc
    if not isinstance(loaded, dict):
        raise ConfigError(["config root must be a mapping of sections"])

    for section, value in loaded.items():
        if section not in tree:
            errors.append(f"unknown config section {section!r}")
        elif isinstance(tree[section], dict):
            if not isinstance(value, dict):
                errors.append(f"section {section!r} must be a mapping")
                continue
            for key, v in value.items():
                if key not in tree[section]:
                    errors.append(f"unknown config key {section!r}.{key!r}")
                else:
                    tree[section][key] = v
        else:
            tree[section] = value

    for dotted, raw in _env_overrides(os.environ if env is None else env):
        _set_path(tree, dotted, yaml.safe_load(raw), errors)

    for item in overrides:
        if "=" not in item:
            errors.append(f"override {item!r} is not key=value")
            continue
        dotted, _, raw = item.partition("=")
        _set_path(tree, dotted.strip(), yaml.safe_load(raw), errors)

    if errors:
        raise ConfigError(errors)

    digest = tree_digest(tree)
    sections = {}
    for name, cls in (("datagen", GenConfig), ("model", ModelConfig),
                      ("train", TrainConfig), ("paths", Paths)):
        try:
            sections[name] = cls(**tree[name])
        except (ValueError, TypeError) as exc:
            errors.append(f"{name}: {exc}")
    if not isinstance(tree["seed"], int) or isinstance(tree["seed"], bool):
        errors.append("seed must be an integer")
    if errors:
        raise ConfigError(errors)
    return RunConfig(seed=tree["seed"], digest=digest, **sections)


def example_yaml() -> str:
    """A complete config with every default spelled out."""
    return yaml.safe_dump(default_tree(), sort_keys=True, default_flow_style=False)
