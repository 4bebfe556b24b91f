"""Run configuration: TOML file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from sfnet.model import SFNetConfig
from sfnet.training import AugmentationPolicy

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

OUTPUT_ROOT_ENV = "SFNET_OUTPUT_ROOT"
SYNTHETIC = "synthetic"

PRESETS = {
    # desk: CPU-sized model and a faster learning rate for the short schedule
    "desk": {"epochs": 50, "lr": 1e-3, "model": {}},
    "paper": {"epochs": 300, "lr": 1e-4, "model": {"input_extent": 256}},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = SYNTHETIC
    synth_per_class: int = 256
    split_ratio: float = 0.5
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    augment: tuple = ()
    augment_params: dict = field(default_factory=dict)
    augment_seed: int = 0
    epochs: Optional[int] = None
    batch_size: int = 16
    lr: Optional[float] = None
    seed: int = 0
    output_dir: str = "run"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        defaults = PRESETS[self.preset]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.lr is None:
            self.lr = defaults["lr"]
        self.augment = tuple(self.augment)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 1 <= self.batch_size:
            raise ConfigError("batch_size must be positive")
        if self.synth_per_class < 2:
            raise ConfigError("synth_per_class must be at least 2")
        # fail early on bad model or augmentation settings
        self.sfnet_config()
        self.policy()

    # derived objects ---------------------------------------------------
    def sfnet_config(self) -> SFNetConfig:
        base = dict(PRESETS[self.preset]["model"])
        base.update(self.model)
        try:
            return SFNetConfig(**base)
        except TypeError as exc:
            raise ConfigError(f"unknown model setting: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def policy(self) -> AugmentationPolicy:
        try:
            return AugmentationPolicy(self.augment, self.augment_params, self.augment_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def is_synthetic(self) -> bool:
        return self.data == SYNTHETIC

    def out_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    # serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d

    def content_hash(self) -> str:
        """Short hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["model"] = self.sfnet_config().to_dict()
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def save(self, path) -> None:
        doc = {**self.to_dict(), "config_hash": self.content_hash()}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = {k: v for k, v in d.items() if k != "config_hash"}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc

    @classmethod
    def load_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# TOML layout:
#   seed, epochs, batch_size, lr, preset, output_dir   (top level)
#   [data]    source, per_class, split_ratio
#   [model]   any SFNetConfig field
#   [augment] transforms, seed, [augment.params.<name>]
_TOP = {"seed", "epochs", "batch_size", "lr", "preset", "output_dir"}


def from_toml(path, **overrides) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(doc, **overrides)


def from_mapping(doc: dict, **overrides) -> RunConfig:
    kw = {}
    unknown = set(doc) - _TOP - {"data", "model", "augment"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in _TOP & set(doc):
        kw[key] = doc[key]
    data = doc.get("data", {})
    bad = set(data) - {"source", "per_class", "split_ratio"}
    if bad:
        raise ConfigError(f"unknown [data] keys {sorted(bad)}")
    if "source" in data:
        kw["data"] = data["source"]
    if "per_class" in data:
        kw["synth_per_class"] = data["per_class"]
    if "split_ratio" in data:
        kw["split_ratio"] = data["split_ratio"]
    if "model" in doc:
        kw["model"] = dict(doc["model"])
    aug = doc.get("augment", {})
    bad = set(aug) - {"transforms", "seed", "params"}
    if bad:
        raise ConfigError(f"unknown [augment] keys {sorted(bad)}")
    if "transforms" in aug:
        kw["augment"] = tuple(aug["transforms"])
    if "seed" in aug:
        kw["augment_seed"] = aug["seed"]
    if "params" in aug:
        kw["augment_params"] = {k: dict(v) for k, v in aug["params"].items()}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw)
