"""Run configuration: one JSON document, every leaf overridable by a CLI flag.

``DEFAULT_CONFIG`` is the single source of truth for field names, default
values, and value types.  A config file replaces defaults wholesale per key;
dotted command-line flags (e.g. ``--train.epochs 5``) override both.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any

from .detector import DetectorConfig
from .errors import UsageError
from .model import ModelConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "paths": {
        "data_dir": "runs/data",
        "checkpoint": "runs/model.ckpt",
        "out_dir": "runs/out",
    },
    "data": {
        "n_videos": 200,
        "T": 100,
        "C": 32,
        "boundaries_per_video": 3,
        "step_fraction": 0.5,
        "noise_sigma": 0.02,
        "min_separation": 20,
        "end_margin": 8,
        "fps": 10.0,
        "n_raters": 3,
        "rater_jitter_sigma": 1.0,
        "knot_spacing": 4,
        "id_prefix": "vid",
    },
    "model": {
        "stages": 3,
        "in_channels": 32,
        "channels": 32,
        "hidden": [256, 49152, 49152],
        "k": 2,
        "n_blocks": 3,
        "order_sets": [[0], [0, 1], [0, 1, 2]],
        "pcm_channels": 16,
        "ffn_expansion": 2,
        "se_hidden": 16,
        "cls_hidden": 64,
        "activation": "silu",
    },
    "scheduler": {
        "exit_thresholds": [0.5, 0.5, 0.5],
        "exit_radii": [4, 4, 4],
    },
    "train": {
        "epochs": 20,
        "lr": 0.01,
        "batch_size": 8,
        "alphas": [1.0, 1.0, 1.0],
        "sigma": 1.0,
    },
    "eval": {
        "thresholds": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
    },
    "sweep": {
        "radii": [0, 2, 4, 8],
    },
}


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten(value, path))
        else:
            flat[path] = value
    return flat


def _set_path(tree: dict, path: str, value: Any) -> None:
    keys = path.split(".")
    node = tree
    for key in keys[:-1]:
        node = node[key]
    node[keys[-1]] = value


def _coerce(path: str, raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"flag --{path} expects a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise UsageError(f"flag --{path} expects a JSON list, got '{raw}'") from exc
        if not isinstance(value, list):
            raise UsageError(f"flag --{path} expects a JSON list, got '{raw}'")
        return value
    return raw


def flag_paths() -> list[str]:
    return sorted(_flatten(DEFAULT_CONFIG))


def load_config(config_path: str | None, overrides: dict[str, str]) -> dict:
    """Defaults, then config file values, then dotted flag overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    defaults_flat = _flatten(DEFAULT_CONFIG)
    if config_path:
        if not os.path.exists(config_path):
            raise UsageError(f"config file not found: {config_path}")
        with open(config_path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}") from exc
        for path, value in _flatten(file_cfg).items():
            if path not in defaults_flat:
                raise UsageError(f"unknown config field '{path}'")
            _set_path(config, path, value)
    for path, raw in overrides.items():
        if path not in defaults_flat:
            raise UsageError(f"unknown config flag '--{path}'")
        _set_path(config, path, _coerce(path, raw, defaults_flat[path]))
    return config


# -- typed views --------------------------------------------------------------


def model_config(config: dict) -> ModelConfig:
    m = config["model"]
    return ModelConfig(
        stages=m["stages"],
        in_channels=m["in_channels"],
        channels=m["channels"],
        hidden=tuple(m["hidden"]),
        k=m["k"],
        n_blocks=m["n_blocks"],
        order_sets=tuple(tuple(s) for s in m["order_sets"]),
        pcm_channels=m["pcm_channels"],
        ffn_expansion=m["ffn_expansion"],
        se_hidden=m["se_hidden"],
        cls_hidden=m["cls_hidden"],
        activation=m["activation"],
    )


def synthetic_spec(config: dict) -> SyntheticSpec:
    d = config["data"]
    return SyntheticSpec(
        n_videos=d["n_videos"],
        T=d["T"],
        C=d["C"],
        boundaries_per_video=d["boundaries_per_video"],
        step_fraction=d["step_fraction"],
        noise_sigma=d["noise_sigma"],
        seed=config["seed"],
        min_separation=d["min_separation"],
        end_margin=d["end_margin"],
        fps=d["fps"],
        n_raters=d["n_raters"],
        rater_jitter_sigma=d["rater_jitter_sigma"],
        knot_spacing=d["knot_spacing"],
        id_prefix=d["id_prefix"],
    )


def train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        epochs=t["epochs"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        alphas=tuple(t["alphas"]),
        sigma=t["sigma"],
        seed=config["seed"],
    )


def detector_configs(config: dict, model_cfg: ModelConfig) -> list[DetectorConfig]:
    """Per-detector order/exit settings for the inference scheduler."""
    s = config["scheduler"]
    thresholds = list(s["exit_thresholds"])
    radii = list(s["exit_radii"])
    if len(thresholds) != model_cfg.stages or len(radii) != model_cfg.stages:
        raise UsageError(
            f"scheduler needs {model_cfg.stages} thresholds and radii, "
            f"got {len(thresholds)} / {len(radii)}"
        )
    alphas = config["train"]["alphas"]
    if len(alphas) != model_cfg.stages:
        raise UsageError(f"train.alphas needs {model_cfg.stages} entries")
    return [
        DetectorConfig(
            order_set=model_cfg.order_sets[l],
            n_blocks=model_cfg.n_blocks,
            exit_threshold=thresholds[l],
            exit_radius=radii[l],
            loss_weight=alphas[l],
        )
        for l in range(model_cfg.stages)
    ]
