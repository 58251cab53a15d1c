"""Experiment configuration: JSON schema with defaults, deterministic seed
derivation, config hashing, and stage manifests.

Every stage derives its randomness as hash(master seed, stage name, index),
so deleting downstream outputs and re-running only downstream stages
reproduces byte-identical artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

AT_DEFAULTS = {
    "norm": "l2",
    "epsilon": 1.0,
    "pgd_steps": 10,
    "pgd_step_size": None,
    "random_start": True,
}

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "out": "runs/experiment",
    "dataset": {
        "kind": "synthetic",  # synthetic | idx | cifar
        "classes": 64,
        "per_class_train": 20,
        "per_class_test": 10,
        "image_size": 28,
        "channels": 1,
        "noise": 0.1,
        "train_images": None,  # idx kind
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "train_files": None,  # cifar kind
        "test_files": None,
    },
    "model": {
        "arch": "conv-small",
        "feature_dim": 0,  # 0 -> architecture default
        "head_bias": False,
    },
    "train": {
        "epochs": 8,
        "batch_size": 64,
        "optimizer": {"kind": "adam", "lr": 0.001, "momentum": 0.9},
        "at": None,
        "robust_eval": "final",
    },
    "capture": {
        "batch_size": 8,
        "anchors": 5,
        "batches_per_anchor": 5,
        "distinct_labels": True,
        "disclose_batch_size": True,
    },
    "attack": {
        "steps": 5000,
        "lr": 0.1,
        "tv_weight": 1e-6,
        "restarts": 5,
        "invert": "anchor",  # none | anchor | all
        "baseline": False,
        "baseline_steps": 300,
        "baseline_restarts": 1,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        base = defaults[key]
        if isinstance(base, dict) and isinstance(value, dict):
            out[key] = _merge(base, value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(user: dict) -> dict:
    """Merge a user config over the defaults; unknown keys are rejected."""
    cfg = _merge(DEFAULTS, user, "")
    if isinstance(cfg["train"].get("at"), dict):
        cfg["train"]["at"] = _merge(AT_DEFAULTS, cfg["train"]["at"], "train.at")
    if cfg["dataset"]["kind"] not in ("synthetic", "idx", "cifar"):
        raise ConfigError(f"dataset.kind must be synthetic|idx|cifar, got {cfg['dataset']['kind']!r}")
    if cfg["attack"]["invert"] not in ("none", "anchor", "all"):
        raise ConfigError(f"attack.invert must be none|anchor|all, got {cfg['attack']['invert']!r}")
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    """Read a JSON config file and apply scalar flag overrides (flags win)."""
    with open(path, "r", encoding="utf-8") as f:
        user = json.load(f)
    cfg = validate_config(user)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_by_path(cfg, key, value)
    return cfg


def set_by_path(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = copy.deepcopy(AT_DEFAULTS) if part == "at" else {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """Deterministic per-stage seed; 63-bit so it stays a friendly int."""
    digest = hashlib.sha256(f"{master}/{stage}/{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def write_json_atomic(obj, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def write_manifest(out_dir, stage: str, cfg: dict, inputs: dict[str, str], outputs: dict[str, str]):
    """Record config hash plus input/output file hashes for exact re-runs."""
    manifest_dir = os.path.join(out_dir, "manifests")
    os.makedirs(manifest_dir, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "inputs": inputs,
        "outputs": outputs,
    }
    write_json_atomic(manifest, os.path.join(manifest_dir, f"{stage}.json"))
    return manifest
