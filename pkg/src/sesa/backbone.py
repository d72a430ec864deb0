"""The frozen latent denoiser: noise schedule, text conditioning, UNet, loss, sampler.

Desk-scale mapping of the production configuration::

    production (SD 1.5)            here
    image 512 x 512                image 64 x 64
    latent 64 x 64 x 4             latent 16 x 16 x 3 (4x mean pool of 2x - 1)
    attention at 64/32/16/8        attention at 16/8/4
    CLIP text encoder              whitespace tokenizer + embedding table
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigMismatch, InvalidRange, ShapeMismatch, StepOutOfRange
from .nn import Conv2d, GroupNorm, Linear, Module, ModuleList, ResBlock, TransformerBlock, timestep_embedding
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def alpha_bar(self, t):
        """ᾱ at 1-based step ``t``; ``t == 0`` is the clean sample (ᾱ = 1)."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear β ramp with running-product ᾱ."""
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRange(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got {T}, {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def q_sample(z0, t, eps, sched):
    """Noise ``z0`` to step ``t``: √ᾱ_t · z0 + √(1 − ᾱ_t) · eps."""
    if eps.shape != z0.shape:
        raise ShapeMismatch(f"eps {eps.shape} vs z0 {z0.shape}")
    if not 1 <= t <= sched.T:
        raise StepOutOfRange(f"step {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    return T.add(T.scale(z0, math.sqrt(ab)), T.scale(eps, math.sqrt(1.0 - ab)))


# ---------------------------------------------------------------- text

VOCAB = tuple("""
<unk> a an the one two both his her their its with and while at in on of to from by near towards
is are be appears appear seems possibly looking smiling standing sitting walking running lying
kneeling leaning posing casually outdoors indoors person man woman child people player chef
hand hands finger fingers palm thumb fist arm arms wrist left right open closed raised spread
holding holds hold grasping grasps grasp gripping grips grip waving waves wave pointing points
point touching touches touch reaching reaches reach shaking shakes shake clapping claps clap
catching catches catch throwing throws throw lifting lifts lift pressing presses press typing
types type playing plays play eating eats eat drinking drinks drink cutting cuts cut wrapping
wraps wrap around handle umbrella pink cup mug ball phone book bottle racket bat knife fork
glass bag kite frisbee camera sign tool stick surfboard pizza sandwich apple remote keyboard
laptop table kitchen street park beach field room office court sunny snowy sky grass water
background wall floor city road sand sea window colorful textured striped plain dark bright
red blue green yellow white black small large big gesture pose up down
""".split())


@dataclass
class TextEmbedding:
    tokens: list
    embeddings: Tensor
    token_strings: list

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not len(self.tokens) == len(self.token_strings) == n:
            raise ShapeMismatch(f"{len(self.tokens)} tokens, {len(self.token_strings)} strings, {n} rows")


def _norm_word(word):
    return re.sub(r"^[^\w<>]+|[^\w<>]+$", "", word.lower())


class TextEncoder(Module):
    """Whitespace tokenizer over a fixed vocabulary plus an embedding table."""

    def __init__(self, d_text, rng, max_tokens=32, vocab=VOCAB):
        self.vocab = {w: i for i, w in enumerate(dict.fromkeys(vocab))}
        self.max_tokens = max_tokens
        self.table = Tensor(rng.standard_normal((len(self.vocab), d_text)), requires_grad=True)

    def tokenize(self, prompt):
        words = prompt.split()
        if not words:
            words = ["<unk>"]
        if len(words) > self.max_tokens:
            log.warning("prompt truncated from %d to %d tokens", len(words), self.max_tokens)
            words = words[:self.max_tokens]
        ids = [self.vocab.get(_norm_word(w), 0) for w in words]
        return ids, words

    def __call__(self, prompt):
        ids, words = self.tokenize(prompt)
        rows = Tensor(self.table.data[ids])
        return TextEmbedding(tokens=ids, embeddings=rows, token_strings=words)


# ---------------------------------------------------------------- UNet

@dataclass(frozen=True)
class DenoiserConfig:
    """Toy UNet shape.

    ``resolutions`` lists the attention resolutions from the latent extent
    down; all but the last are encoder levels, the last is the middle block.
    """

    latent_extent: int = 16
    latent_channels: int = 3
    resolutions: tuple = (16, 8, 4)
    channels: tuple = (16, 24, 24)
    heads: int = 1
    d_text: int = 16
    time_dim: int = 32
    max_tokens: int = 32

    def __post_init__(self):
        res = tuple(self.resolutions)
        if not res or res[0] != self.latent_extent or any(b * 2 != a for a, b in zip(res, res[1:])):
            raise InvalidRange(f"resolutions {res} must halve down from latent extent {self.latent_extent}")
        if len(self.channels) != len(res):
            raise InvalidRange(f"{len(self.channels)} channel widths for {len(res)} levels")
        if any(c % self.heads for c in self.channels):
            raise InvalidRange(f"channels {self.channels} not divisible by {self.heads} heads")

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_extent, self.latent_extent)

    @property
    def image_extent(self):
        return 4 * self.latent_extent

    @property
    def levels(self):
        return len(self.resolutions)


class Encoder(Module):
    """Input conv, encoder levels and middle block; returns one feature per level."""

    def __init__(self, cfg, rng):
        ch = cfg.channels
        self.time1 = Linear(cfg.time_dim, cfg.time_dim, rng)
        self.time2 = Linear(cfg.time_dim, cfg.time_dim, rng)
        self.conv_in = Conv2d(cfg.latent_channels, ch[0], 3, rng)
        self.res = ModuleList(ResBlock(ch[i], ch[i], cfg.time_dim, rng) for i in range(cfg.levels))
        self.attn = ModuleList(TransformerBlock(ch[i], cfg.d_text, cfg.heads, rng) for i in range(cfg.levels))
        self.down = ModuleList(Conv2d(ch[i], ch[i + 1], 4, rng, stride=2, padding=1)
                               for i in range(cfg.levels - 1))
        self.mid_out = ResBlock(ch[-1], ch[-1], cfg.time_dim, rng)
        self.time_dim = cfg.time_dim

    def time_embed(self, t):
        return self.time2(T.silu(self.time1(timestep_embedding(t, self.time_dim))))

    def __call__(self, x, t, ctx, cross_bias=None, record=None):
        temb = self.time_embed(t)
        h = self.conv_in(x)
        feats = []
        n = len(self.res)
        for i in range(n):
            h = self.res[i](h, temb)
            h = self.attn[i](h, ctx, cross_bias, record, tag=f"enc{i}" if i < n - 1 else "mid")
            if i < n - 1:
                feats.append(h)
                h = self.down[i](h)
        feats.append(self.mid_out(h, temb))
        return feats, temb


class Decoder(Module):
    def __init__(self, cfg, rng):
        ch = cfg.channels
        n = cfg.levels
        self.up = ModuleList(Conv2d(ch[i + 1], ch[i], 3, rng) for i in range(n - 1))
        self.res = ModuleList(ResBlock(ch[i], ch[i], cfg.time_dim, rng) for i in range(n - 1))
        self.attn = ModuleList(TransformerBlock(ch[i], cfg.d_text, cfg.heads, rng) for i in range(n - 1))
        self.norm_out = GroupNorm(ch[0])
        self.conv_out = Conv2d(ch[0], cfg.latent_channels, 3, rng)

    def __call__(self, feats, temb, ctx):
        h = feats[-1]
        for i in reversed(range(len(self.up))):
            h = self.up[i](T.upsample_nearest(h, 2))
            h = T.add(h, feats[i])
            h = self.res[i](h, temb)
            h = self.attn[i](h, ctx)
        return self.conv_out(T.silu(self.norm_out(h)))


class Denoiser(Module):
    """ε-prediction UNet.  Parameter names start with ``backbone.``."""

    def __init__(self, cfg=None, seed=0):
        cfg = cfg or DenoiserConfig()
        rng = T.make_rng(seed)
        self.config = cfg
        self.text = TextEncoder(cfg.d_text, rng, cfg.max_tokens)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def named_parameters(self, prefix="backbone."):
        return super().named_parameters(prefix)

    def state_dict(self, prefix="backbone."):
        return super().state_dict(prefix)

    def load_state_dict(self, state, prefix="backbone."):
        super().load_state_dict(state, prefix)

    def embed(self, prompt):
        return self.text(prompt)

    def denoise(self, z_t, t, c_t, control=None):
        """Predict the noise in ``z_t``.

        ``z_t`` is [C, H, W], or [N, C, H, W] with ``t``, ``c_t`` and
        ``control`` given as length-N sequences.  ``control`` is whatever
        :meth:`sesa.control.ControlNet.__call__` returned; its features are
        added to the skip and middle features before decoding.
        """
        if z_t.ndim == 4:
            n = z_t.shape[0]
            ts = _per_sample(t, n)
            cts = _per_sample(c_t, n)
            ctrls = _per_sample(control, n)
            return T.stack([self.denoise(T.index(z_t, i), ts[i], cts[i], ctrls[i]) for i in range(n)])
        if z_t.shape != self.config.latent_shape:
            raise ShapeMismatch(f"latent {z_t.shape}, configured {self.config.latent_shape}")
        ctx = c_t.embeddings
        feats, temb = self.encoder(z_t, t, ctx)
        if control is not None:
            if control.config != self.config:
                raise ConfigMismatch("control branch was built for a different denoiser config")
            feats = control.apply(feats)
        return self.decoder(feats, temb, ctx)

    def __call__(self, z_t, t, c_t, c_f=None):
        return self.denoise(z_t, t, c_t)


def _per_sample(value, n):
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ShapeMismatch(f"{len(value)} per-sample values for batch of {n}")
        return list(value)
    return [value] * n


# ---------------------------------------------------------------- latent space

def encode_image(img):
    """[C, 4r, 4r] image in [0, 1] to a [C, r, r] latent in [-1, 1]."""
    x = np.asarray(img, dtype=np.float64) * 2.0 - 1.0
    c, h, w = x.shape
    return x.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4))


def decode_latent(z):
    """Nearest-neighbour inverse of :func:`encode_image`, clipped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    return np.clip((np.repeat(np.repeat(z, 4, axis=-2), 4, axis=-1) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------- objective

def training_loss(batch, sched, model, rng):
    """Squared-error noise-prediction loss averaged over the batch.

    ``batch`` is a sequence of ``(z0, c_t, c_f)`` triples and ``model`` any
    callable ``model(z_t, t, c_t, c_f) -> eps_hat``.  For each sample a step
    ``t`` is drawn uniformly from ``1..T``, then ``eps`` from a standard
    normal, in that order.
    """
    losses = []
    for z0, c_t, c_f in batch:
        t = int(rng.integers(1, sched.T + 1))
        eps = Tensor(rng.standard_normal(z0.shape))
        z_t = q_sample(z0, t, eps, sched)
        diff = T.sub(eps, model(z_t, t, c_t, c_f))
        losses.append(T.sum(T.square(diff)))
    total = losses[0]
    for item in losses[1:]:
        total = T.add(total, item)
    return T.scale(total, 1.0 / len(losses))


def sample(sched, model, c_t, shape, steps, rng, c_f=None):
    """Ancestral DDPM reverse chain from z_T ~ N(0, I).

    With ``steps < T`` the chain visits an evenly spaced subset of steps and
    uses the matching respaced β.
    """
    if not 1 <= steps <= sched.T:
        raise StepOutOfRange(f"steps {steps} outside [1, {sched.T}]")
    ts = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))[::-1]
    z = rng.standard_normal(shape)
    with T.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
            ab, ab_prev = sched.alpha_bar(int(t)), sched.alpha_bar(t_prev)
            beta = 1.0 - ab / ab_prev
            eps_hat = model(Tensor(z), int(t), c_t, c_f).data
            mean = (z - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
            if t_prev > 0:
                var = beta * (1.0 - ab_prev) / (1.0 - ab)
                z = mean + math.sqrt(var) * rng.standard_normal(shape)
            else:
                z = mean
    return Tensor(z)
