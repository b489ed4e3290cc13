"""Run configuration: JSON schema, strict validation, digest, converters.

Configs are plain JSON (UTF-8, no comments). Validation fills defaults,
rejects unknown keys, and reports field-level paths. The digest is a
sha256 over the canonical validated config (output directory excluded),
so two runs with equal digests produce byte-identical outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .data import SyntheticSpec
from .encoders import ModelConfig, TowerConfig
from .errors import ConfigError
from .losses import KD_TERMS, KdWeights
from .trainkit import TrainSettings

SWEEP_PARAMETERS = (*KD_TERMS, "mask_ratio")

DEFAULT_CONFIG = {
    "seed": 0,
    "batch_size": 128,
    "steps": 2000,
    "warmup_steps": 100,
    "eval_interval": 100,
    "mask_ratio": 0.25,
    "gd_mode": "total",
    "out_dir": None,
    "data": {
        "latent_dim": 16,
        "classes": 32,
        "patches": 16,
        "patch_dim": 8,
        "tokens": 8,
        "token_dim": 8,
        "noise_std_image": 0.3,
        "noise_std_text": 0.3,
        "latent_jitter_std": 1.0,
        "train_size": 8192,
        "val_size": 1024,
        "test_size": 1024,
    },
    "teacher": {"embed_dim": 32, "width": 128, "blocks": 4, "hidden": None,
                "proj_to": None, "fuse_with": None},
    "student": {"embed_dim": 32, "width": 32, "blocks": 2, "hidden": None,
                "proj_to": None, "fuse_with": None},
    "weights": {name: 0.0 for name in KD_TERMS},
    "optim": {"lr": 0.001, "weight_decay": 0.1, "beta1": 0.9, "beta2": 0.98,
              "eps": 1e-6},
    "sweep": {"parameter": None, "values": []},
}

# Scalar top-level fields that --set and --seed may override.
TOP_LEVEL_SCALARS = ("seed", "batch_size", "steps", "warmup_steps",
                     "eval_interval", "mask_ratio", "gd_mode", "out_dir")


def _fail(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _check_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    return value


def _check_float(value, path, minimum=None, maximum=None, exclusive_max=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    value = float(value)
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        _fail(path, f"must be <= {maximum}, got {value}")
    if exclusive_max is not None and value >= exclusive_max:
        _fail(path, f"must be < {exclusive_max}, got {value}")
    return value


def _check_optional_int(value, path, minimum=1):
    if value is None:
        return None
    return _check_int(value, path, minimum)


def _merge_section(user: dict, defaults: dict, path: str) -> dict:
    if not isinstance(user, dict):
        _fail(path, f"expected an object, got {user!r}")
    unknown = set(user) - set(defaults)
    if unknown:
        _fail(path, f"unknown keys {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(user)
    return merged


def validate_config(raw: dict) -> dict:
    """Fill defaults and validate; returns the normalized config dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge_section(raw, DEFAULT_CONFIG, "config")
    for section in ("data", "teacher", "student", "weights", "optim", "sweep"):
        cfg[section] = _merge_section(
            raw.get(section, {}), DEFAULT_CONFIG[section], section)

    _check_int(cfg["seed"], "seed", 0)
    _check_int(cfg["batch_size"], "batch_size", 1)
    _check_int(cfg["steps"], "steps", 0)
    _check_int(cfg["warmup_steps"], "warmup_steps", 0)
    if cfg["steps"] > 0 and cfg["warmup_steps"] >= cfg["steps"]:
        _fail("warmup_steps", f"must be < steps ({cfg['steps']}), got {cfg['warmup_steps']}")
    _check_int(cfg["eval_interval"], "eval_interval", 1)
    cfg["mask_ratio"] = _check_float(cfg["mask_ratio"], "mask_ratio", 0.0, exclusive_max=1.0)
    if cfg["gd_mode"] not in ("total", "anchor"):
        _fail("gd_mode", f"must be 'total' or 'anchor', got {cfg['gd_mode']!r}")
    if cfg["out_dir"] is not None and not isinstance(cfg["out_dir"], str):
        _fail("out_dir", "expected a string path or null")

    d = cfg["data"]
    for name in ("latent_dim", "classes", "patches", "patch_dim", "tokens",
                 "token_dim", "train_size", "val_size", "test_size"):
        _check_int(d[name], f"data.{name}", 1)
    for name in ("noise_std_image", "noise_std_text", "latent_jitter_std"):
        d[name] = _check_float(d[name], f"data.{name}", 0.0)

    for side in ("teacher", "student"):
        m = cfg[side]
        for name in ("embed_dim", "width", "blocks"):
            _check_int(m[name], f"{side}.{name}", 1)
        m["hidden"] = _check_optional_int(m["hidden"], f"{side}.hidden")
        m["proj_to"] = _check_optional_int(m["proj_to"], f"{side}.proj_to")
        m["fuse_with"] = _check_optional_int(m["fuse_with"], f"{side}.fuse_with")

    for name in KD_TERMS:
        cfg["weights"][name] = _check_float(cfg["weights"][name], f"weights.{name}", 0.0)

    o = cfg["optim"]
    o["lr"] = _check_float(o["lr"], "optim.lr", 0.0)
    o["weight_decay"] = _check_float(o["weight_decay"], "optim.weight_decay", 0.0)
    o["beta1"] = _check_float(o["beta1"], "optim.beta1", 0.0, exclusive_max=1.0)
    o["beta2"] = _check_float(o["beta2"], "optim.beta2", 0.0, exclusive_max=1.0)
    o["eps"] = _check_float(o["eps"], "optim.eps", 0.0)

    s = cfg["sweep"]
    if s["parameter"] is not None:
        if s["parameter"] not in SWEEP_PARAMETERS:
            _fail("sweep.parameter", f"must be one of {SWEEP_PARAMETERS}")
        if not isinstance(s["values"], list) or not s["values"]:
            _fail("sweep.values", "expected a non-empty list of numbers")
        s["values"] = [
            _check_float(v, f"sweep.values[{i}]", 0.0,
                         exclusive_max=1.0 if s["parameter"] == "mask_ratio" else None)
            for i, v in enumerate(s["values"])]
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return validate_config(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply repeatable ``--set key=value`` flags to top-level scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, text = item.partition("=")
        if key not in TOP_LEVEL_SCALARS:
            raise ConfigError(
                f"--set supports top-level scalar fields {TOP_LEVEL_SCALARS}, got {key!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        cfg[key] = value
    return validate_config(cfg)


def config_digest(cfg: dict) -> str:
    """sha256 of the canonical config, excluding the output directory."""
    canon = copy.deepcopy(cfg)
    canon.pop("out_dir", None)
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Converters into the runtime dataclasses
# ---------------------------------------------------------------------------

def to_synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = cfg["data"]
    return SyntheticSpec(
        latent_dim=d["latent_dim"], classes=d["classes"],
        patches=d["patches"], patch_dim=d["patch_dim"],
        tokens=d["tokens"], token_dim=d["token_dim"],
        noise_std_image=d["noise_std_image"], noise_std_text=d["noise_std_text"],
        latent_jitter_std=d["latent_jitter_std"],
        train_size=d["train_size"], val_size=d["val_size"], test_size=d["test_size"],
        seed=cfg["seed"])


def to_model_config(cfg: dict, side: str) -> ModelConfig:
    if side not in ("teacher", "student"):
        raise ConfigError(f"model side must be teacher or student, got {side!r}")
    m = cfg[side]
    d = cfg["data"]
    return ModelConfig(
        embed_dim=m["embed_dim"],
        image=TowerConfig(tokens=d["patches"], token_dim=d["patch_dim"],
                          width=m["width"], blocks=m["blocks"], hidden=m["hidden"]),
        text=TowerConfig(tokens=d["tokens"], token_dim=d["token_dim"],
                         width=m["width"], blocks=m["blocks"], hidden=m["hidden"]),
        proj_to=m["proj_to"], fuse_with=m["fuse_with"])


def to_weights(cfg: dict) -> KdWeights:
    return KdWeights(**cfg["weights"])


def to_settings(cfg: dict) -> TrainSettings:
    o = cfg["optim"]
    return TrainSettings(
        steps=cfg["steps"], batch_size=cfg["batch_size"],
        warmup_steps=cfg["warmup_steps"], base_lr=o["lr"],
        weight_decay=o["weight_decay"], beta1=o["beta1"], beta2=o["beta2"],
        adam_eps=o["eps"], eval_interval=cfg["eval_interval"],
        mask_ratio=cfg["mask_ratio"], gd_mode=cfg["gd_mode"])
