"""Declarative experiment configuration (JSON), validated against the bundled schema."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import dataset_io
from .dataset_io import Dataset, Split
from .poisoner import PoisonConfig
from .trainer import HyperParams
from .transforms import Kind, resize

DEFAULTS = {
    "attack": {
        "enabled": True,
        "kind": "rotation",
        "theta_star": 16.0,
        "domain": [-10.0, 10.0],
        "gamma": 0.05,
        "target_label": 1,
        "seed": 0,
        "fill": 0.0,
        "exclude_target_class_from_selection": False,
    },
    "translation_attack": {"theta_star": 6, "domain": [-3, 3]},
    "train": {"arch": "ConvNet-S", **HyperParams().to_dict()},
    "eval": {"sweep": "default", "transform_benign": False},
}


class ConfigError(ValueError):
    pass


def load_schema(name: str = "experiment") -> dict:
    text = resources.files("batt").joinpath("schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # ------------------------------------------------------------------ construction
    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        merged = copy.deepcopy(data)
        attack_in = data.get("attack", {})
        attack = dict(DEFAULTS["attack"])
        if Kind.parse(attack_in.get("kind", "rotation")) is Kind.TRANSLATION:
            attack.update(DEFAULTS["translation_attack"])
        attack.update(attack_in)
        attack["kind"] = Kind.parse(attack["kind"]).value
        merged["attack"] = attack
        merged["train"] = {**DEFAULTS["train"], **data.get("train", {})}
        merged["eval"] = {**DEFAULTS["eval"], **data.get("eval", {})}
        merged.setdefault("defense", None)
        merged.setdefault("ablation", {})
        return cls(merged, Path(base_dir) if base_dir is not None else Path.cwd())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(data, path.parent)

    def with_overrides(self, **attack) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["attack"].update(attack)
        return ExperimentConfig(raw, self.base_dir)

    # ------------------------------------------------------------------ sections
    def path(self, value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_dir(self) -> Path:
        return self.path(self.raw["output_dir"])

    @property
    def attack_enabled(self) -> bool:
        return bool(self.raw["attack"]["enabled"])

    @property
    def poison(self) -> PoisonConfig:
        a = self.raw["attack"]
        kind = Kind.parse(a["kind"])
        theta = a["theta_star"]
        low, high = a["domain"]
        if kind is Kind.TRANSLATION:
            theta, low, high = int(theta), int(low), int(high)
        else:
            theta, low, high = float(theta), float(low), float(high)
        return PoisonConfig(
            kind=kind,
            theta_star=theta,
            domain_low=low,
            domain_high=high,
            gamma=a["gamma"],
            target_label=a["target_label"],
            seed=a["seed"],
            fill=a["fill"],
            exclude_target_class_from_selection=a["exclude_target_class_from_selection"],
        )

    @property
    def hyper(self) -> HyperParams:
        t = {k: v for k, v in self.raw["train"].items() if k != "arch"}
        return HyperParams(**t)

    @property
    def arch_name(self) -> str:
        return self.raw["train"]["arch"]

    def sweep_grid(self, kind: Kind | None = None) -> list[float] | None:
        from .evaluator import default_grid

        sweep = self.raw["eval"]["sweep"]
        kind = kind or self.poison.kind
        if sweep is None:
            return None
        if sweep == "default":
            return default_grid(kind)
        if isinstance(sweep, dict):
            return [float(v) for v in np.arange(sweep["low"], sweep["high"] + 1e-9, sweep["step"])]
        return [float(v) for v in sweep]

    @property
    def defense(self) -> dict | None:
        return self.raw.get("defense") or None

    def section_digests(self) -> dict[str, str]:
        keys = ("dataset", "attack", "train", "eval", "defense", "ablation")
        return {k: digest_of(self.raw.get(k)) for k in keys}

    def digest(self) -> str:
        return digest_of({k: v for k, v in self.raw.items() if k not in ("output_dir", "name")})

    # ------------------------------------------------------------------ data
    def load_datasets(self) -> tuple[Dataset, Dataset]:
        ds = self.raw["dataset"]
        fmt = ds["format"]
        k = ds.get("num_classes")

        def need(key):
            if key not in ds:
                raise ConfigError(f"dataset format {fmt!r} needs dataset.{key}")
            p = self.path(ds[key])
            if not p.exists():
                raise FileNotFoundError(f"dataset path does not exist: {p}")
            return p

        if fmt == "cifar10":
            train, test = dataset_io.load_cifar10_binary(need("directory"))
        elif fmt == "idx":
            train = dataset_io.load_idx(need("train_images"), need("train_labels"), k, Split.TRAIN)
            test = dataset_io.load_idx(need("test_images"), need("test_labels"), k or train.num_classes, Split.TEST)
            if k is None and test.num_classes != train.num_classes:
                k = max(train.num_classes, test.num_classes)
                train.num_classes = test.num_classes = k
        elif fmt == "image_dir":
            root = need("directory")
            train = dataset_io.load_image_dir(root, need("train_manifest"), k, split=Split.TRAIN)
            test = dataset_io.load_image_dir(root, need("test_manifest"), k or train.num_classes, split=Split.TEST)
        else:
            train = dataset_io.read_battds(need("train_path"))
            test = dataset_io.read_battds(need("test_path"))
            test.split = Split.TEST
        if "train_limit" in ds:
            train = train.subset(np.arange(min(ds["train_limit"], len(train))))
        if "test_limit" in ds:
            test = test.subset(np.arange(min(ds["test_limit"], len(test))))
        if "resize" in ds:
            h, w = ds["resize"]
            train = Dataset(resize(train.images, h, w), train.labels, train.num_classes, train.split, train.source)
            test = Dataset(resize(test.images, h, w), test.labels, test.num_classes, test.split, test.source)
        return train, test
