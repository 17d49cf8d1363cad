"""Experiment configuration: TOML documents validated against a fixed schema.

Every section and key is declared in ``SCHEMA``; anything else is
rejected before any compute starts. ``sparsity = 0`` turns inhibition off
and ``capacity = 0`` derives the per-task buffer size from ``k``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cells import CellKind, CoeffSpec
from .network import ModelConfig


class ConfigError(ValueError):
    pass


# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "model": {
        "cell": (str, "miru2"),
        "n_x": (int, 28),
        "n_h": (int, 128),
        "n_y": (int, 10),
        "n_T": (int, 28),
        "sparsity": (float, 0.0),
        "loss": (str, "softmax"),
        "output_bias": (bool, True),
        "precision": (int, 32),
    },
    "coefficients": {
        "mode": (str, "scalar"),
        "update": (float, 0.8),
        "reset": (float, 0.55),
        "low": (float, 0.1),
        "high": (float, 0.9),
    },
    "optimizer": {
        "kind": (str, "rmsprop"),
        "lr": (float, 1e-3),
        "weight_decay": (float, 0.0),
        "rho": (float, 0.9),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
    },
    "train": {
        "batch_size": (int, 32),
        "epochs": (int, 15),
        "seed": (int, 0),
        "clip": (float, 0.0),
        "train_fraction": (float, 1.0),
        "eval_batch": (int, 2000),
    },
    "continual": {
        "tasks": (int, 5),
        "k": (int, 0),
        "k_interleave": (int, -1),
        "capacity": (int, 0),
        "seeds": (list, [0, 1, 2]),
    },
    "data": {
        "dir": (str, ""),
        "format": (str, "mnist"),
        "npz": (str, ""),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}

CHOICES = {
    ("model", "loss"): ("softmax", "sigmoid"),
    ("model", "precision"): (32, 64),
    ("coefficients", "mode"): ("scalar", "random"),
    ("optimizer", "kind"): ("sgd", "rmsprop", "adam"),
    ("data", "format"): ("mnist", "npz"),
}


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()}
            for sec, keys in SCHEMA.items()}


def _coerce(section: str, key: str, value):
    typ = SCHEMA[section][key][0]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{section}.{key}: expected {typ.__name__}, got {value!r}")
    if typ is list and not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{section}.{key}: expected a list of integers")
    choices = CHOICES.get((section, key))
    if choices is not None:
        if isinstance(value, str):
            value = value.lower()
        if value not in choices:
            raise ConfigError(f"{section}.{key}: {value!r} not one of {choices}")
    return value


def merge(base: dict, doc: dict) -> dict:
    out = copy.deepcopy(base)
    for section, body in doc.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            out[section][key] = _coerce(section, key, value)
    return out


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value`` with ``value`` in TOML syntax (bare words are strings)."""
    lhs, sep, rhs = text.partition("=")
    if not sep or "." not in lhs:
        raise ConfigError(f"override {text!r} is not section.key=value")
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def load(path=None, overrides=()) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        cfg = merge(cfg, doc)
    for item in overrides:
        section, key, value = parse_override(item)
        cfg = merge(cfg, {section: {key: value}})
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m = cfg["model"]
    for key in ("n_x", "n_h", "n_y", "n_T"):
        if m[key] < 1:
            raise ConfigError(f"model.{key} must be >= 1")
    if not 0.0 <= m["sparsity"] < 1.0:
        raise ConfigError("model.sparsity must lie in [0, 1); 0 disables inhibition")
    try:
        CellKind.parse(m["cell"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    c = cfg["coefficients"]
    for key in ("update", "reset", "low", "high"):
        if not 0.0 <= c[key] <= 1.0:
            raise ConfigError(f"coefficients.{key} must lie in [0, 1]")
    if c["low"] > c["high"]:
        raise ConfigError("coefficients.low exceeds coefficients.high")
    if cfg["optimizer"]["lr"] <= 0:
        raise ConfigError("optimizer.lr must be positive")
    t = cfg["train"]
    if t["batch_size"] < 1 or t["epochs"] < 0 or t["eval_batch"] < 1:
        raise ConfigError("train.batch_size/eval_batch must be >= 1 and epochs >= 0")
    if not 0.0 < t["train_fraction"] <= 1.0:
        raise ConfigError("train.train_fraction must lie in (0, 1]")
    cl = cfg["continual"]
    if cl["tasks"] < 1 or cl["k"] < 0 or cl["capacity"] < 0 or cl["k_interleave"] < -1:
        raise ConfigError("continual: tasks >= 1, k >= 0, capacity >= 0, k_interleave >= -1")
    if cl["k"] > t["batch_size"]:
        raise ConfigError("continual.k cannot exceed train.batch_size")
    if not cl["seeds"]:
        raise ConfigError("continual.seeds must not be empty")


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(m["n_x"], m["n_h"], m["n_y"], m["n_T"], m["cell"],
                       sparsity=m["sparsity"] or None, loss=m["loss"],
                       output_bias=m["output_bias"])


def coeff_spec(cfg: dict) -> CoeffSpec:
    c = cfg["coefficients"]
    return CoeffSpec(lam=c["update"], beta=c["reset"], random=c["mode"] == "random",
                     low=c["low"], high=c["high"])


def optimizer_kwargs(cfg: dict) -> dict:
    o = cfg["optimizer"]
    kw = {"lr": o["lr"], "weight_decay": o["weight_decay"]}
    if o["kind"] == "rmsprop":
        kw.update(rho=o["rho"], eps=o["eps"])
    elif o["kind"] == "adam":
        kw.update(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    return kw


def config_hash(cfg: dict) -> str:
    """Digest of everything that affects results (the output location does not)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    raw = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()
