"""Python access to the PSP-Seg core: phantoms, metrics, controller checks, training."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    Error,
    convergence_check,
    dice_score,
    eb_parameter_count,
    generate_dataset,
    generate_phantom,
    improvement_check,
    nsd_score,
)

__all__ = [
    "ConfigError",
    "Error",
    "checkpoint_manifest",
    "convergence_check",
    "dice_score",
    "eb_parameter_count",
    "evaluate",
    "generate_dataset",
    "generate_phantom",
    "improvement_check",
    "nsd_score",
    "timeline",
    "train",
    "variant",
]


def variant(name):
    return _json.loads(_core.variant_json(name))


def train(config_path, resume=None):
    return _json.loads(_core.train_json(str(config_path), "" if resume is None else str(resume)))


def evaluate(config_path, checkpoint, split="test"):
    return _json.loads(_core.evaluate_json(str(config_path), str(checkpoint), split))


def checkpoint_manifest(path):
    return _json.loads(_core.checkpoint_manifest_json(str(path)))


def timeline(events_path):
    return _json.loads(_core.timeline_json(str(events_path)))
