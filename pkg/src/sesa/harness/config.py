"""Run configuration: a flat ``key = value`` file with dotted section names.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are ignored.  Keys must be known (see
``DEFAULTS``); the value is parsed according to the type of the default:
booleans accept ``true/false/on/off/1/0``, tuples are comma separated.
"""

from __future__ import annotations

from pathlib import Path

from ..backbone import DenoiserConfig
from ..errors import ConfigError, DataError
from ..fusion import FusionConfig

DEFAULTS = {
    "seed": 0,
    "model.latent_extent": 16,
    "model.latent_channels": 3,
    "model.resolutions": (16, 8, 4),
    "model.channels": (16, 24, 24),
    "model.heads": 1,
    "model.d_text": 16,
    "model.time_dim": 32,
    "model.max_tokens": 32,
    "schedule.steps": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "fusion.enabled": True,
    "fusion.normalize": True,
    "fusion.per_level": False,
    "fusion.transpose": False,
    "enhance.enabled": True,
    "enhance.alpha": 2.0,
    "enhance.index_rule": "union",
    "train.epochs": 3,
    "train.batch": 2,
    "train.lr": 1e-5,
    "train.weight_decay": 0.01,
    "train.limit": 0,
    "train.eval_samples": 32,
    "sample.steps": 50,
    "data.count": 200,
    "data.crop_margin": 0.1,
    "semantics.captioner_url": "mock:captioner",
    "semantics.captioner_model": "captioner",
    "semantics.extractor_url": "mock:extractor",
    "semantics.extractor_model": "extractor",
    "semantics.timeout": 30.0,
    "semantics.retries": 2,
    "semantics.backoff": 0.5,
    "semantics.fixtures": "",
    "semantics.parallelism": 1,
    "eval.embedder": "pixel_stats",
    "eval.metrics": ("fid", "kid"),
    "eval.kid_subset": 0,
    "eval.kid_subsets": 1,
}

_CHOICES = {
    "enhance.index_rule": ("union", "intersection"),
    "eval.embedder": ("pixel_stats", "channel_mean"),
}

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def parse_value(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated settings for one command.  Index it like a dict."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)
        self.validate()

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = parse_value(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def replace(self, **changes):
        """Copy with ``section__key=value`` overrides (``__`` stands for the dot)."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig(vals)

    def validate(self):
        for key, allowed in _CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {self.values[key]!r}")
        for key in ("train.lr", "schedule.beta_start", "schedule.beta_end", "semantics.timeout"):
            if not self.values[key] > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("train.epochs", "train.limit", "semantics.retries", "data.count"):
            if self.values[key] < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("train.batch", "sample.steps", "semantics.parallelism", "schedule.steps"):
            if self.values[key] < 1:
                raise ConfigError(f"{key} must be at least 1")
        if self.values["enhance.alpha"] < 0:
            raise ConfigError("enhance.alpha must be non-negative")
        try:
            self.denoiser_config()
        except DataError as exc:
            raise ConfigError(f"model: {exc}") from None

    # -------------------------------------------------- derived objects

    def denoiser_config(self):
        v = self.values
        return DenoiserConfig(
            latent_extent=v["model.latent_extent"], latent_channels=v["model.latent_channels"],
            resolutions=tuple(v["model.resolutions"]), channels=tuple(v["model.channels"]),
            heads=v["model.heads"], d_text=v["model.d_text"], time_dim=v["model.time_dim"],
            max_tokens=v["model.max_tokens"],
        )

    def fusion_config(self):
        v = self.values
        return FusionConfig(v["fusion.enabled"], v["fusion.normalize"], v["fusion.per_level"], v["fusion.transpose"])

    @property
    def alpha(self):
        """Bias strength, or None when enhancement is off."""
        return self.values["enhance.alpha"] if self.values["enhance.enabled"] else None

    # -------------------------------------------------- text form

    @classmethod
    def from_text(cls, text, origin="<config>"):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
            values[key] = parse_value(key, value)
        return cls(values)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.values.items())

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


# Settings the test-suite and demos use for quick CPU training runs.
TOY_OVERRIDES = {"train.lr": 1e-3, "train.epochs": 30}


def toy_config(**changes):
    return RunConfig(TOY_OVERRIDES).replace(**changes)
