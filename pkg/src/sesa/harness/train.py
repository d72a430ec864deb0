"""Training loop for the control branch."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..backbone import make_schedule, training_loss
from ..errors import NanLoss
from .checkpoint import LOG_FILE, build_model, load_model, save_checkpoint
from .config import RunConfig
from .data import load_dataset
from .optim import AdamW

log = logging.getLogger(__name__)

# second word of the generator seed for the held-out loss estimate
EVAL_STREAM = 0x5E5A


@dataclass
class TrainResult:
    model: object
    optim: AdamW
    epoch: int
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)


def schedule_for(cfg):
    return make_schedule(cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])


def _batches(examples, model):
    return [(ex.z0, model.backbone.embed(ex.prompt), ex.condition) for ex in examples]


def evaluation_loss(model, items, sched, seed, batch):
    """Mean loss on ``items`` under a fixed draw of steps and noise."""
    rng = np.random.default_rng([int(seed), EVAL_STREAM])
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(items), batch):
            chunk = items[lo:lo + batch]
            total += training_loss(chunk, sched, model, rng).item() * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def train(cfg, data_dir, out_dir=None, resume=None, examples=None):
    """Train the control branch; the backbone stays frozen.

    Epoch ``e`` shuffles and draws noise from a generator seeded by
    ``(seed, e)``, so resuming from an epoch-``k`` checkpoint and training on
    is bit-identical to an uninterrupted run.  ``cfg["train.epochs"]`` is the
    total epoch count including resumed ones.
    """
    model = build_model(cfg)
    params = model.trainable_parameters()
    optim = AdamW(params, lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"])
    start = 0
    history = []
    if resume is not None:
        state = load_model(Path(resume) / "model.sesa", model)
        if "optim.t" in state:
            optim.load_state(state)
        start = int(state["meta.epoch"])
        log_path = Path(resume) / LOG_FILE
        if log_path.exists():
            history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            history = [h for h in history if h["epoch"] < start]
    if examples is None:
        examples = load_dataset(data_dir, cfg.denoiser_config().image_extent, cfg["train.limit"])
    items = _batches(examples, model)
    sched = schedule_for(cfg)
    seed, batch = cfg["seed"], cfg["train.batch"]
    held_out = items[:cfg["train.eval_samples"]] if cfg["train.eval_samples"] else items
    initial = evaluation_loss(model, held_out, sched, seed, batch)
    log.info("initial loss %.4f on %d samples", initial, len(held_out))

    for epoch in range(start, cfg["train.epochs"]):
        rng = np.random.default_rng([int(seed), epoch])
        order = rng.permutation(len(items))
        losses = []
        for step, lo in enumerate(range(0, len(items), batch)):
            chunk = [items[i] for i in order[lo:lo + batch]]
            loss = training_loss(chunk, sched, model, rng)
            if not math.isfinite(loss.item()):
                raise NanLoss(epoch, step)
            optim.zero_grad()
            T.backward(loss, params)
            optim.step()
            losses.append(loss.item())
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "loss": mean})
        log.info("epoch %d loss %.4f", epoch, mean)

    epoch = max(start, cfg["train.epochs"])
    final = evaluation_loss(model, held_out, sched, seed, batch)
    log.info("final loss %.4f", final)
    if out_dir is not None:
        save_checkpoint(out_dir, model, cfg, optim, epoch)
        with open(Path(out_dir) / LOG_FILE, "w", encoding="utf-8") as fh:
            for h in history:
                fh.write(json.dumps(h, sort_keys=True) + "\n")
    return TrainResult(model, optim, epoch, initial, final, history)


def load_or_default(path):
    return RunConfig.load(path) if path else RunConfig()
