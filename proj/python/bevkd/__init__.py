"""Structured knowledge distillation for multi-view BEV 3D detection.

Configs are passed around as JSON strings using the same schema as the
command-line tool (see docs/config.md).
"""

import json

from ._bevkd import (
    ConfigError,
    ContractError,
    Dataset,
    Detector,
    DimensionError,
    FormatError,
    ablate,
    bev_response,
    default_layer_map,
    distill,
    generate_dataset,
    gradcheck,
    hit_views,
    load_dataset,
    response_loss,
    save_dataset,
    total_loss,
    train,
)
from ._bevkd import default_config as _default_config
from ._bevkd import load_config as _load_config


def default_config():
    """Default training config as a dict."""
    return json.loads(_default_config())


def load_config(path):
    """Training config file as a dict, with defaults filled in."""
    return json.loads(_load_config(path))


def _text(config):
    return config if isinstance(config, str) else json.dumps(config)


def train_model(config, data):
    """Detection-only training; returns (Detector, loss curve)."""
    return train(_text(config), data)


def distill_model(config, data, teacher):
    """Distillation against a frozen teacher; returns (Detector, loss curve)."""
    return distill(_text(config), data, teacher)


def run_ablation(config, train_data, eval_data, teacher):
    """Returns (rows, formatted table)."""
    return ablate(_text(config), train_data, eval_data, teacher)


__all__ = [
    "ConfigError", "ContractError", "Dataset", "Detector", "DimensionError", "FormatError",
    "bev_response", "default_config", "default_layer_map", "distill_model", "generate_dataset",
    "gradcheck", "hit_views", "load_config", "load_dataset", "response_loss", "run_ablation",
    "save_dataset", "total_loss", "train_model",
]
