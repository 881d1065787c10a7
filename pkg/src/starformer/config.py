"""Declarative run configuration with dotted-key overrides.

A run config is one YAML or JSON mapping.  Its top level holds the training
keys (``epochs``, ``batch_size``, ``model``, ``mask``, ``loss`` ...) next to
``data`` and ``out``::

    data: {path: motif.jsonl, ratios: [0.8, 0.1, 0.1], split_seed: 0}
    out: runs/starformer
    epochs: 30
    mask: {strategy: darem, phi: 0.2, zeta: 0.3, gamma: 0.1}

``--set mask.gamma=0.05`` rewrites a single leaf; values are parsed as YAML
scalars, so ``none`` stays a string while ``null`` becomes ``None``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, ValidationError
from .trainer import TrainConfig

DATA_DEFAULTS = {"path": None, "ratios": [0.8, 0.1, 0.1], "split_seed": 0}


def read_mapping(path: str | os.PathLike) -> dict:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {item!r} has an empty key segment")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key.split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        path, value = parse_override(item)
        node = doc
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return doc


@dataclass
class RunConfig:
    train: TrainConfig
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    out: str | None = None

    @classmethod
    def from_mapping(cls, doc: dict, *, infer: dict | None = None) -> "RunConfig":
        """Validate every section; ``infer`` fills model keys left unset (input_dim, num_classes)."""
        doc = copy.deepcopy(doc)
        data = {**DATA_DEFAULTS, **(doc.pop("data", None) or {})}
        unknown = set(data) - set(DATA_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        out = doc.pop("out", None)
        model = dict(doc.get("model") or {})
        for key, value in (infer or {}).items():
            if model.get(key) is None:
                model[key] = value
        doc["model"] = model
        try:
            train = TrainConfig.from_dict(doc)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        except ValidationError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(train, data, out)

    def to_dict(self) -> dict:
        return {"data": self.data, "out": self.out, **self.train.to_dict()}


def load_run_config(path=None, overrides=(), *, seed: int | None = None, out: str | None = None,
                    infer: dict | None = None) -> RunConfig:
    doc = read_mapping(path) if path else {}
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    return RunConfig.from_mapping(doc, infer=infer)
