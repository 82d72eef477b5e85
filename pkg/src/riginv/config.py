"""Run configuration: nested defaults, JSON file layer, flag overrides, provenance."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from .datagen import PerturbConfig
from .mesh import RigidConfig
from .nnet.model import ModelConfig
from .train import LossConfig, TrainConfig

FORMAT_VERSION = 1
ENV_CONFIG = "RIGINV_CONFIG"


def defaults() -> dict:
    return {
        "rig": None,
        "data": {"path": None, "limit": None},
        "dataset": {"total_samples": 22575, "resolution": 512, "seed": None,
                    "canonical_path": None, "normal_space": "tangent",
                    "rigid": asdict(RigidConfig())},
        "perturb": asdict(PerturbConfig()),
        "model": asdict(ModelConfig()),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in asdict(TrainConfig()).items()},
        "loss": asdict(LossConfig()),
    }


class RunConfig:
    """Merged configuration tree. Every leaf remembers where its value came from."""

    def __init__(self, tree: Optional[dict] = None):
        self.tree = tree if tree is not None else defaults()
        self.provenance: dict = {}

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        cfg = cls()
        path = path or os.environ.get(ENV_CONFIG)
        if path:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            data.pop("provenance", None)
            data.pop("format_version", None)
            cfg._merge(data, (), f"file:{path}")
        return cfg

    def _merge(self, data: dict, prefix: tuple, source: str) -> None:
        for key, val in data.items():
            keys = prefix + (key,)
            node = self.get(*prefix) if prefix else self.tree
            if not isinstance(node, dict) or key not in node:
                raise ValueError(f"unknown config key {'.'.join(keys)}")
            if isinstance(val, dict) and isinstance(node[key], dict):
                self._merge(val, keys, source)
            else:
                node[key] = val
                self.provenance[".".join(keys)] = source

    def get(self, *keys):
        node = self.tree
        for k in keys:
            node = node[k]
        return node

    def set(self, value, *keys) -> None:
        """Flag override; ``None`` means the flag was not given."""
        if value is None:
            return
        node = self.tree
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
        self.provenance[".".join(keys)] = "flag"

    def echo(self) -> dict:
        out = copy.deepcopy(self.tree)
        out["format_version"] = FORMAT_VERSION
        out["provenance"] = dict(sorted(self.provenance.items()))
        return out

    def write_echo(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.echo(), indent=1, sort_keys=True), encoding="utf-8")
        return path

    # typed views

    def perturb(self) -> PerturbConfig:
        d = dict(self.get("perturb"))
        d["intensity_clamp"] = tuple(d["intensity_clamp"])
        return PerturbConfig(**d)

    def rigid(self) -> RigidConfig:
        return RigidConfig(**self.get("dataset", "rigid"))

    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(self.get("model"))

    def train(self) -> TrainConfig:
        return TrainConfig(**self.get("train"))

    def loss(self) -> LossConfig:
        return LossConfig(**self.get("loss"))
