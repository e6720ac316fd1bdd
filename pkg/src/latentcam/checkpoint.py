"""Unified checkpoint: every named parameter + run metadata in one file.

Layout: one UTF-8 JSON header line, then one tensor record (header line +
raw little-endian float64 payload, the `.t64` format) per parameter in the
order listed, then one record per extra tensor (optimizer moments). The
header carries config, seeds, stage label, step count and serialized RNG
state so interrupted runs resume bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .tensor_engine import ParameterSet, tensor_from_stream, tensor_to_bytes

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "config_hash"]

FORMAT = "latentcam-ckpt-v1"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, np.ndarray]
    extras: dict[str, np.ndarray]

    @property
    def stage(self) -> str:
        return self.header["stage"]

    def param_groups(self) -> dict[str, str]:
        return {e["name"]: e["group"] for e in self.header["params"]}


def save_checkpoint(
    path,
    params: ParameterSet,
    *,
    stage: str,
    step: int,
    config: dict,
    seeds: dict,
    rng_state: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    extras = extras or {}
    header = {
        "format": FORMAT,
        "stage": stage,
        "step": int(step),
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "rng_state": rng_state,
        "params": [{"name": p.name, "group": p.group} for p in params],
        "extras": sorted(extras.keys()),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for p in params:
            fh.write(tensor_to_bytes(p.data))
        for name in header["extras"]:
            fh.write(tensor_to_bytes(extras[name]))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"not a {FORMAT} file: {path}")
        params = {}
        for entry in header["params"]:
            params[entry["name"]] = tensor_from_stream(fh)
        extras = {}
        for name in header["extras"]:
            extras[name] = tensor_from_stream(fh)
    return Checkpoint(header=header, params=params, extras=extras)
