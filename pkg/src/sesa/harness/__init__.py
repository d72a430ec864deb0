"""Configuration, data, training and command-line workflows."""

from .config import RunConfig, toy_config
from .optim import AdamW
from .synthetic import gen_synthetic, make_sample

__all__ = ["AdamW", "RunConfig", "gen_synthetic", "make_sample", "toy_config"]
