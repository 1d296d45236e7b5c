"""Run configuration: documented defaults, JSON overrides, ``FORGE_SEED``."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import fields
from pathlib import Path

from .lora_ensemble import DistillConfig

DEFAULTS = {
    "seed": 0,
    # hypergraph / HGNN
    "k": 8,
    "hgnn_layers": 2,
    "hgnn_hidden": None,
    "activation": "relu",
    "s_min": 0.15,
    "v_max": 0.85,
    "pred_mode": "literal",
    "pred_mask_source": "decoded",
    # "rebuild": each branch gets its own hypergraph; "frozen": both use the reference one
    "mvhg_structure": "rebuild",
    # unified objective and latent optimization
    "lambda_ism": 1.0,
    "lambda_mvhg": 0.1,
    "delta_t": 50,
    "t_min": 300,
    "t_max": 500,
    "lr": 1.0,
    "init_noise": 0.5,
    "divergence_factor": 10.0,
    # noise schedule
    "T": 1000,
    "beta_start": 1e-4,
    "beta_end": 2e-2,
    # synthetic data
    "resolution": 64,
    "patch": 8,
    "views": ["front", "up"],
    # adapters and distillation
    "lora_rank": 4,
    "lora_strength": 0.5,
    "samples_per_view": 10,
    "probes_per_view": 8,
    "distill": {f.name: f.default for f in fields(DistillConfig) if f.name != "seed"},
    # gradient check
    "grad_sizes": ["2x4x4x2", "2x8x8x4"],
    "grad_ks": [2, 4, 8],
    "grad_tolerance": 1e-4,
}


class ConfigError(ValueError):
    pass


def load_config(path=None, environ=None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys raise ConfigError."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        for key, value in user.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "distill":
                if not isinstance(value, dict):
                    raise ConfigError("'distill' must be an object")
                bad = set(value) - set(cfg["distill"])
                if bad:
                    raise ConfigError(f"unknown distill keys {sorted(bad)}")
                cfg["distill"].update(value)
            else:
                cfg[key] = value
    env = os.environ if environ is None else environ
    if env.get("FORGE_SEED"):
        try:
            cfg["seed"] = int(env["FORGE_SEED"])
        except ValueError as exc:
            raise ConfigError("FORGE_SEED must be an integer") from exc
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["k"] < 1:
        raise ConfigError("k must be >= 1")
    if cfg["activation"] not in ("relu", "identity"):
        raise ConfigError("activation must be relu or identity")
    if cfg["lambda_ism"] < 0 or cfg["lambda_mvhg"] < 0:
        raise ConfigError("loss weights must be non-negative")
    if cfg["pred_mode"] not in ("literal", "scaled"):
        raise ConfigError("pred_mode must be literal or scaled")
    if cfg["mvhg_structure"] not in ("rebuild", "frozen"):
        raise ConfigError("mvhg_structure must be rebuild or frozen")
    if cfg["pred_mask_source"] not in ("decoded", "input"):
        raise ConfigError("pred_mask_source must be decoded or input")
    if not 0 < cfg["t_min"] <= cfg["t_max"] <= cfg["T"] or cfg["t_min"] - cfg["delta_t"] < 1:
        raise ConfigError("need 1 <= t_min - delta_t and t_min <= t_max <= T")
    if cfg["lr"] <= 0:
        raise ConfigError("lr must be > 0")
    if cfg["patch"] < 1 or cfg["resolution"] < 1:
        raise ConfigError("patch and resolution must be positive")
    try:
        distill_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid distill settings: {exc}") from exc


def distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(**cfg["distill"], seed=cfg["seed"])
