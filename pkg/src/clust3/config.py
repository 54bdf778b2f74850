"""Strict JSON experiment configuration.

Unknown keys and ill-typed values are rejected with the 1-based line of the
offending key, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

from .adapt import AdaptConfig
from .data import CORRUPTIONS, DatasetSpec
from .errors import ConfigError
from .nn import ModelSpec
from .train import TrainConfig

SECTIONS = {"dataset": DatasetSpec, "model": ModelSpec, "train": TrainConfig, "adapt": AdaptConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    corruptions: tuple = CORRUPTIONS
    seeds: tuple = (0,)
    output_dir: str = "runs"


_TOP_LEVEL = {"corruptions", "seeds", "output_dir"} | set(SECTIONS)
_NULLABLE = {"J", "max_batches"}


def _line_of(text, path):
    if not text:
        return None
    pos = 0
    for part in path:
        m = re.compile(r'"%s"\s*:' % re.escape(str(part))).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _coerce(value, default, where, text):
    """Check ``value`` against the type of the field default and normalize lists."""
    line = _line_of(text, where)
    name = ".".join(where)
    if value is None and where[-1] in _NULLABLE:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}", line)
        return value
    if isinstance(default, int) and default is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}", line)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}", line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}", line)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}", line)
        return tuple(value)
    # default None: optional integer
    if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name}: expected an integer or null, got {value!r}", line)
    return value


def _build_section(cls, raw, section, text):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object", _line_of(text, [section]))
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}", _line_of(text, [section, key]))
        kwargs[key] = _coerce(value, getattr(defaults, key), [section, key], text)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}", _line_of(text, [section])) from exc


def from_dict(raw: dict, text="") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1)
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"unknown key {key}", _line_of(text, [key]))
    kwargs = {name: _build_section(cls, raw.get(name, {}), name, text) for name, cls in SECTIONS.items()}
    base = ExperimentConfig()
    for key in ("corruptions", "seeds", "output_dir"):
        if key in raw:
            kwargs[key] = _coerce(raw[key], getattr(base, key), [key], text)
    cfg = ExperimentConfig(**kwargs)
    for kind in cfg.corruptions:
        if kind not in CORRUPTIONS and kind != "clean":
            raise ConfigError(f"unknown corruption {kind!r}", _line_of(text, ["corruptions"]))
    if cfg.model.num_classes != cfg.dataset.num_classes or cfg.model.image_size != cfg.dataset.image_size:
        raise ConfigError("model.num_classes/image_size must match dataset", _line_of(text, ["model"]))
    return cfg


def parse_override(item: str):
    """``"adapt.J=1"`` -> ``(["adapt", "J"], 1)``; values are JSON, else plain strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, value = item.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides):
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            if part not in SECTIONS and part not in raw:
                raise ConfigError(f"override {item!r}: unknown section {part!r}")
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return raw


def load(path=None, overrides=None) -> ExperimentConfig:
    text = ""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_dict(raw, text)


def to_dict(cfg) -> dict:
    def norm(v):
        if isinstance(v, tuple):
            return [norm(x) for x in v]
        if isinstance(v, dict):
            return {str(k): norm(x) for k, x in v.items()}
        return v

    return norm(dataclasses.asdict(cfg))


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def content_hash(cfg) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()
