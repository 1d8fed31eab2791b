"""Flat-key experiment configuration.

A config is a YAML mapping whose keys are dotted names (nested mappings
are flattened on load, so both styles work)::

    backbone: dinov2-l14
    adapt: lora
    regime: single
    datasets: [lucchi]
    data.lucchi.root: /data/lucchi_pp
    data.lucchi.layout: lucchi
    train.seed: 0
    num_runs: 5

Every recognised key is listed in :data:`SCHEMA` (per-dataset keys in
:data:`DATASET_SCHEMA`). Unknown keys are rejected by name.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


def _choice(*options):
    def parse(v):
        if not isinstance(v, str) or v.lower() not in options:
            raise ValueError(f"expected one of {options}")
        return v.lower()

    parse.__name__ = "|".join(options)
    return parse


def _opt(fn):
    def parse(v):
        return None if v is None else fn(v)

    parse.__name__ = f"{fn.__name__}|null"
    return parse


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true/false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _str_list(v):
    if isinstance(v, str):
        v = [s.strip() for s in v.split(",") if s.strip()]
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        raise ValueError("expected a list of strings")
    return list(v)


# key -> (parser, default, description)
SCHEMA: dict[str, tuple] = {
    "backbone": (_str, "toy-s14", "registry key, e.g. dinov2-l14, dinov3-l16, openclip-l14, toy-s14"),
    "adapt": (_choice("head", "lora"), "head", "head-only training or LoRA + head"),
    "regime": (_choice("single", "paired"), "single", "one dataset, or the union of two"),
    "sampling": (_choice("unbalanced", "balanced"), "unbalanced", "paired batching: shuffle or 1+1"),
    "datasets": (_str_list, None, "dataset names; each needs data.<name>.root"),
    "resize.target_longest_edge": (_opt(_int), None, "paired regime longest edge; null = native, snapped down"),
    "head.hidden_channels": (_int, 512, "decoder width on the patch grid"),
    "head.refine_channels": (_int, 32, "width of the full-resolution refinement conv"),
    "lora.rank": (_int, 16, "LoRA rank r"),
    "lora.alpha": (_float, 32.0, "LoRA scaling alpha"),
    "lora.targets": (_str_list, ["qkv", "proj"], "subset of {qkv, proj}"),
    "lora.dropout": (_float, 0.0, "dropout on the LoRA input"),
    "train.max_epochs": (_int, 1000, ""),
    "train.patience": (_int, 20, "early-stopping patience (epochs)"),
    "train.learning_rate": (_float, 5e-5, "AdamW learning rate"),
    "train.weight_decay": (_float, 1e-4, "AdamW decoupled weight decay"),
    "train.batch_size": (_int, 2, ""),
    "train.validation_fraction": (_float, 0.10, "hold-out fraction of each training split"),
    "train.seed": (_int, 0, "seed of run 0; run k uses seed + k"),
    "train.cache_features": (_bool, True, "precompute frozen-backbone tokens for head-only runs"),
    "train.device": (_str, "cpu", "torch device"),
    "num_runs": (_int, 5, "seeded repetitions aggregated as mean ± std"),
    "out": (_str, "runs", "output root (not part of the fingerprint)"),
    "diagnostics.sources": (_opt(_str_list), None, "'<dataset>:<split>' per domain; default each dataset's test split"),
    "diagnostics.pooling": (_choice("mean", "cls"), "mean", "image-level pooling of final-layer tokens"),
    "diagnostics.probe_C": (_float, 1.0, "inverse L2 strength of the logistic-regression probe"),
    "diagnostics.probe_validation_fraction": (_float, 0.10, "probe hold-out fraction"),
    "diagnostics.seed": (_int, 0, "probe split seed"),
}

LAYOUTS = {"lucchi": "LUCCHI_SPLIT_DIRS", "vnc": "VNC_STACKS"}
PUBLISHED_COUNTS = {"lucchi": (165, 165), "vnc": (17, 3)}

DATASET_SCHEMA: dict[str, tuple] = {
    "root": (_str, None, "dataset directory"),
    "layout": (_choice(*LAYOUTS), "lucchi", "lucchi = {train,test}/{img,mask}; vnc = stack1/{img,mask}, stack2/img"),
    "train_count": (_opt(_int), "published", "expected train slices; \"published\" = 165 (lucchi) or 17 (vnc); null disables the check"),
    "test_count": (_opt(_int), "published", "expected test slices (VNC: slices of stack1 held out)"),
    "binarize_threshold": (_opt(_int), 128, "mask values >= threshold are foreground; null = any non-zero"),
    "id": (_opt(_choice("lucchi", "vnc", "other")), None, "dataset identity; default from layout"),
}

UNFINGERPRINTED = {"out"}
_DATA_KEY = re.compile(r"^data\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")


def flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.values)

    def dataset(self, name) -> dict:
        return {k: self.values[f"data.{name}.{k}"] for k in DATASET_SCHEMA}

    def to_yaml(self) -> str:
        return yaml.safe_dump(dict(sorted(self.values.items())), sort_keys=True)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        raw = copy.deepcopy(self.values)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return validate(raw)


def validate(raw: dict) -> ExperimentConfig:
    flat = flatten(raw)
    values: dict[str, Any] = {}
    dataset_keys: dict[str, dict] = {}
    for key, value in flat.items():
        m = _DATA_KEY.match(key)
        if m:
            name, field = m.groups()
            if field not in DATASET_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            dataset_keys.setdefault(name, {})[field] = value
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc} (got {value!r})") from None
    for key, (_, default, _) in SCHEMA.items():
        values.setdefault(key, copy.deepcopy(default))

    names = values["datasets"]
    if not names:
        raise ConfigError("config key 'datasets' is required (list of dataset names)")
    for extra in set(dataset_keys) - set(names):
        raise ConfigError(f"config key 'data.{extra}.*' refers to a dataset not listed in 'datasets'")
    for name in names:
        given = dataset_keys.get(name, {})
        if "root" not in given:
            raise ConfigError(f"config key 'data.{name}.root' is required")
        for field, (parser, default, _) in DATASET_SCHEMA.items():
            key = f"data.{name}.{field}"
            if field in given:
                try:
                    values[key] = parser(given[field])
                except ValueError as exc:
                    raise ConfigError(f"config key {key!r}: {exc} (got {given[field]!r})") from None
            else:
                values[key] = default
        layout = values[f"data.{name}.layout"]
        for i, field in enumerate(("train_count", "test_count")):
            if values[f"data.{name}.{field}"] == "published":
                values[f"data.{name}.{field}"] = PUBLISHED_COUNTS[layout][i]

    regime = values["regime"]
    if regime == "single" and len(names) != 1:
        raise ConfigError(f"config key 'datasets': single regime takes one dataset, got {len(names)}")
    if regime == "paired" and len(names) != 2:
        raise ConfigError(f"config key 'datasets': paired regime takes two datasets, got {len(names)}")
    if values["sampling"] == "balanced" and regime != "paired":
        raise ConfigError("config key 'sampling': balanced sampling requires regime: paired")
    bad = set(values["lora.targets"]) - {"qkv", "proj"}
    if bad or not values["lora.targets"]:
        raise ConfigError(f"config key 'lora.targets': expected a non-empty subset of [qkv, proj], got {values['lora.targets']}")
    if values["num_runs"] < 1:
        raise ConfigError("config key 'num_runs' must be >= 1")
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = validate(raw)
    # relative dataset roots are relative to the config file
    for name in cfg["datasets"]:
        key = f"data.{name}.root"
        root = Path(cfg.values[key]).expanduser()
        if not root.is_absolute():
            cfg.values[key] = str((path.parent / root).resolve())
    return cfg


def fingerprint(values: dict) -> str:
    canon = {k: v for k, v in values.items() if k not in UNFINGERPRINTED}
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def schema_doc() -> str:
    """Markdown table of every key (used by ``emvfm train --help-config``)."""
    lines = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for key, (parser, default, doc) in SCHEMA.items():
        lines.append(f"| `{key}` | {parser.__name__.lstrip('_')} | `{default!r}` | {doc} |")
    for field, (parser, default, doc) in DATASET_SCHEMA.items():
        lines.append(f"| `data.<name>.{field}` | {parser.__name__.lstrip('_')} | `{default!r}` | {doc} |")
    return "\n".join(lines)
