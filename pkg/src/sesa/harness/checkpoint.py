"""Model persistence.

A checkpoint is a directory holding ``model.sesa`` (every backbone and
control tensor, optimizer moments and the epoch counter, in the named-tensor
container) and ``config.cfg``, the run configuration that produced it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..control import ControlledDenoiser
from ..errors import ConfigMismatch
from ..tensor import load_tensors, save_tensors
from .config import RunConfig

MODEL_FILE = "model.sesa"
CONFIG_FILE = "config.cfg"
LOG_FILE = "train_log.jsonl"


def build_model(cfg):
    """Freshly initialized controlled denoiser for a run configuration."""
    return ControlledDenoiser(cfg.denoiser_config(), seed=cfg["seed"], fusion=cfg.fusion_config(),
                              alpha=cfg.alpha, index_rule=cfg["enhance.index_rule"])


def model_state(model):
    state = model.backbone.state_dict()
    state.update(model.control.state_dict())
    return state


def save_model(path, model, optim=None, epoch=0):
    state = model_state(model)
    if optim is not None:
        state.update(optim.state())
    state["meta.epoch"] = np.array(float(epoch))
    save_tensors(path, state)


def load_model(path, model):
    """Load tensors from ``path`` into ``model``; returns the raw state dict.

    Raises ConfigMismatch naming the first parameter that is missing or has
    a different shape.
    """
    state = load_tensors(path)
    model.backbone.load_state_dict(state)
    model.control.load_state_dict(state)
    expected = set(model_state(model))
    stray = sorted(k for k in state if k not in expected and not k.startswith(("optim.", "meta.")))
    if stray:
        raise ConfigMismatch(f"checkpoint tensor {stray[0]!r} has no counterpart in the model")
    return state


def save_checkpoint(directory, model, cfg, optim=None, epoch=0):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / MODEL_FILE, model, optim, epoch)
    cfg.save(out / CONFIG_FILE)
    return out


def load_checkpoint(directory, overrides=None):
    """Rebuild the model recorded in a checkpoint directory.

    ``overrides`` maps config keys to new values; only inference-time
    switches (fusion, enhancement, sampling) should be changed this way.
    Returns ``(model, cfg, state)``.
    """
    directory = Path(directory)
    cfg = RunConfig.load(directory / CONFIG_FILE)
    if overrides:
        vals = dict(cfg.values)
        vals.update(overrides)
        cfg = RunConfig(vals)
    model = build_model(cfg)
    state = load_model(directory / MODEL_FILE, model)
    return model, cfg, state
