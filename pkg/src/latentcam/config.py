"""Run configuration: nested JSON with flat dot-path overrides.

One RunConfig drives every subcommand. Validation happens before any
compute or disk writes; the learning-rate ratio rule can be relaxed with
an explicit flag since only the ratio, not the values, is load-bearing.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

__all__ = ["RunConfig", "ConfigError", "DEFAULT_CONFIG", "parse_overrides"]


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "data": {
        "n_scenes": 2,
        "trajectories_per_scene": 2,
        "T": 16,
        "resolution": [32, 32],
        "seed": 0,
        "dynamic": False,
        "n_objects": 4,
    },
    "model": {
        "D": 128,
        "B": 4,
        "heads": 4,
        "s": 16,
        "d": 64,
        "d_model": 64,
        "adapter_heads": 4,
        "patch": 8,
    },
    "adapter": {"k": 4, "m": 2, "c": 8},
    "train": {
        "stage": "A",
        "steps": 2000,
        "lr_other": 2e-3,
        "lr_adapter": 6e-3,
        "seed": 0,
        "checkpoint_every": 0,
    },
    "sample": {"steps": 20, "seed": 0},
}


def parse_overrides(pairs) -> dict:
    """--set key.path=value pairs; values parse as JSON, else strings."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


@dataclass
class RunConfig:
    data: dict
    model: dict
    adapter: dict
    train: dict
    sample: dict

    @classmethod
    def load(cls, path: str | None = None, overrides: dict | None = None,
             allow_lr_mismatch: bool = False) -> "RunConfig":
        doc = copy.deepcopy(DEFAULT_CONFIG)
        if path:
            with open(path) as fh:
                user = json.load(fh)
            for section, values in user.items():
                if section not in doc:
                    raise ConfigError(f"unknown config section {section!r}")
                if not isinstance(values, dict):
                    raise ConfigError(f"config section {section!r} must be an object")
                doc[section].update(values)
        for key, value in (overrides or {}).items():
            parts = key.split(".")
            node = doc
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config path {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        cfg = cls(**doc)
        cfg.validate(allow_lr_mismatch=allow_lr_mismatch)
        return cfg

    def validate(self, allow_lr_mismatch: bool = False) -> None:
        a, d, m, t = self.adapter, self.data, self.model, self.train
        if a["m"] * a["c"] != 16:
            raise ConfigError(f"adapter.m * adapter.c must equal 16, got {a['m']}*{a['c']}")
        if d["T"] % (a["m"] * a["k"]) != 0:
            raise ConfigError(
                f"data.T={d['T']} not divisible by adapter.m*adapter.k={a['m'] * a['k']}"
            )
        w, h = d["resolution"]
        if w % m["patch"] or h % m["patch"]:
            raise ConfigError(f"resolution {d['resolution']} not divisible by patch {m['patch']}")
        if m["D"] % m["heads"]:
            raise ConfigError(f"model.D={m['D']} not divisible by heads={m['heads']}")
        if m["d_model"] % m["adapter_heads"]:
            raise ConfigError(
                f"model.d_model={m['d_model']} not divisible by adapter_heads={m['adapter_heads']}"
            )
        if t["stage"] not in ("A", "B"):
            raise ConfigError(f"train.stage must be A or B, got {t['stage']!r}")
        if t["lr_adapter"] != 3.0 * t["lr_other"]:
            msg = (
                f"train.lr_adapter={t['lr_adapter']} is not exactly 3x "
                f"train.lr_other={t['lr_other']} (the published ratio)"
            )
            if not allow_lr_mismatch:
                raise ConfigError(msg + "; pass --allow-lr-mismatch to override")
            import sys

            print(f"warning: {msg}", file=sys.stderr)

    def to_dict(self) -> dict:
        return {
            "data": copy.deepcopy(self.data),
            "model": copy.deepcopy(self.model),
            "adapter": copy.deepcopy(self.adapter),
            "train": copy.deepcopy(self.train),
            "sample": copy.deepcopy(self.sample),
        }

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(
            D=self.model["D"],
            B=self.model["B"],
            heads=self.model["heads"],
            s=self.model["s"],
            d=self.model["d"],
            d_model=self.model["d_model"],
            adapter_heads=self.model["adapter_heads"],
            patch=self.model["patch"],
            k=self.adapter["k"],
            m=self.adapter["m"],
            resolution=tuple(self.data["resolution"]),
            max_frames=self.data["T"],
            seed=self.train["seed"],
        )
