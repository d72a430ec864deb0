"""The trainable control branch and its injection into the frozen denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Denoiser, DenoiserConfig
from .enhance import DEFAULT_ALPHA, BiasSpec, build_bias, tag_hand_tokens
from .errors import LevelMismatch, ShapeMismatch
from .fusion import FusionConfig, fuse
from .nn import Conv2d, Module, ModuleList
from .pnm import read_pnm, write_pnm
from .tensor import Tensor

CONDITION_KINDS = ("hand_mesh_render", "synthetic_silhouette")


@dataclass
class ConditionImage:
    pixels: np.ndarray
    kind: str = "synthetic_silhouette"

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        self.pixels = np.clip(px, 0.0, 1.0)

    @classmethod
    def load(cls, path, kind="synthetic_silhouette"):
        return cls(read_pnm(path), kind)

    def save(self, path):
        write_pnm(path, self.pixels)


class ConditionEncoder(Module):
    """Image-space condition to a latent-shaped feature.

    Two stride-2 convolutions bring the image extent down to the latent
    extent, a third refines it, and a zero-initialized 1x1 convolution
    makes the whole encoder output exactly zero before training.
    """

    def __init__(self, cfg, rng, in_channels=1, width=8):
        self.in_channels = in_channels
        self.extent = cfg.image_extent
        self.conv1 = Conv2d(in_channels, width, 4, rng, stride=2, padding=1)
        self.conv2 = Conv2d(width, 2 * width, 4, rng, stride=2, padding=1)
        self.conv3 = Conv2d(2 * width, 2 * width, 3, rng)
        self.zero = Conv2d(2 * width, cfg.latent_channels, 1, rng, zero=True)

    def __call__(self, c_i):
        px = c_i.pixels if isinstance(c_i, ConditionImage) else np.asarray(
            c_i.data if isinstance(c_i, Tensor) else c_i, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.shape[0] != self.in_channels and self.in_channels == 1:
            px = px.mean(axis=0, keepdims=True)
        if px.shape != (self.in_channels, self.extent, self.extent):
            raise ShapeMismatch(f"condition image {px.shape}, expected "
                                f"{(self.in_channels, self.extent, self.extent)}")
        h = T.silu(self.conv1(Tensor(px)))
        h = T.silu(self.conv2(h))
        h = T.silu(self.conv3(h))
        return self.zero(h)


def encode_condition(encoder, c_i):
    return encoder(c_i)


@dataclass
class ControlOutput:
    """Per-level control features plus the attention maps recorded on the way.

    ``features`` holds one [C, r, r] tensor per encoder level followed by the
    middle block.  ``self_maps`` maps resolution to a head-averaged
    [r² x r²] self-attention map; ``cross_maps`` maps layer tag to a
    [r² x L] cross-attention map.
    """

    features: list
    self_maps: dict
    cross_maps: dict
    config: DenoiserConfig
    zero_convs: ModuleList = field(repr=False, default=None)
    fusion: FusionConfig = FusionConfig()
    psi_override: Tensor = None

    def refined(self):
        return fuse(self.features, self.self_maps, self.fusion, self.psi_override)

    def apply(self, feats):
        """Backbone features with the refined control residuals added."""
        return inject(self.refined(), feats, self.zero_convs)


def inject(f_c_refined, feats, zero_convs):
    """f' = Z(f'_c) + f at every level."""
    if not len(f_c_refined) == len(feats) == len(zero_convs):
        raise LevelMismatch(f"{len(f_c_refined)} control levels, {len(feats)} backbone levels, "
                            f"{len(zero_convs)} zero convolutions")
    out = []
    for fc, f, z in zip(f_c_refined, feats, zero_convs):
        r = z(fc)
        if r.shape != f.shape:
            raise LevelMismatch(f"control residual {r.shape} vs backbone feature {f.shape}")
        out.append(T.add(r, f))
    return out


class ControlNet(Module):
    """Condition encoder, trainable copy of the backbone encoder, zero convolutions."""

    def __init__(self, backbone, seed=1, cond_channels=1):
        rng = T.make_rng(seed)
        cfg = backbone.config
        self.config = cfg
        self.cond = ConditionEncoder(cfg, rng, cond_channels)
        self.encoder = backbone.encoder.clone().requires_grad_(True)
        self.zero = ModuleList(Conv2d(c, c, 1, rng, zero=True) for c in cfg.channels)

    def named_parameters(self, prefix="control."):
        return super().named_parameters(prefix)

    def state_dict(self, prefix="control."):
        return super().state_dict(prefix)

    def load_state_dict(self, state, prefix="control."):
        super().load_state_dict(state, prefix)

    def __call__(self, z_t, t, c_t, c_f, bias_spec=None, fusion=FusionConfig()):
        if z_t.shape != c_f.shape:
            raise ShapeMismatch(f"z_t {z_t.shape} and c_f {c_f.shape} differ")
        if z_t.shape != self.config.latent_shape:
            raise ShapeMismatch(f"latent {z_t.shape}, configured {self.config.latent_shape}")
        cross_bias = None
        if bias_spec is not None:
            cross_bias = lambda q, k: build_bias(bias_spec, q, k)  # noqa: E731
        record = {}
        feats, _ = self.encoder(T.add(z_t, c_f), t, c_t.embeddings, cross_bias, record)
        self_maps = {r: m for r, m in record["self"]}
        cross_maps = {tag: m for tag, m in record["cross"]}
        return ControlOutput(feats, self_maps, cross_maps, self.config, self.zero, fusion)


def control_forward(control, z_t, t, c_t, c_f, bias_spec=None, fusion=FusionConfig()):
    return control(z_t, t, c_t, c_f, bias_spec, fusion)


def freeze_backbone(denoiser):
    """Lock every backbone parameter (no gradient, never updated)."""
    backbone = denoiser.backbone if isinstance(denoiser, ControlledDenoiser) else denoiser
    backbone.requires_grad_(False)


class ControlledDenoiser(Module):
    """Frozen denoiser plus control branch: the full ε_θ(z_t, t, c_t, c_i).

    ``alpha`` and ``index_rule`` configure the hand-token bias inside the
    control branch's cross-attention; ``alpha=None`` turns it off.
    """

    def __init__(self, cfg=None, seed=0, fusion=FusionConfig(), alpha=DEFAULT_ALPHA, index_rule="union"):
        self.backbone = Denoiser(cfg, seed)
        freeze_backbone(self.backbone)
        self.control = ControlNet(self.backbone, seed + 1)
        self.fusion = fusion
        self.alpha = alpha
        self.index_rule = index_rule

    @property
    def config(self):
        return self.backbone.config

    def bias_spec(self, c_t):
        if self.alpha is None:
            return None
        tagged = tag_hand_tokens(c_t.token_strings, self.index_rule)
        return BiasSpec(self.alpha, frozenset(tagged.index_list))

    def control_output(self, z_t, t, c_t, c_i):
        c_f = self.control.cond(c_i)
        return self.control(z_t, t, c_t, c_f, self.bias_spec(c_t), self.fusion)

    def __call__(self, z_t, t, c_t, c_i=None):
        if z_t.ndim == 4:
            n = z_t.shape[0]
            ts = t if isinstance(t, (list, tuple)) else [t] * n
            cts = c_t if isinstance(c_t, (list, tuple)) else [c_t] * n
            cis = c_i if isinstance(c_i, (list, tuple)) else [c_i] * n
            return T.stack([self(T.index(z_t, i), ts[i], cts[i], cis[i]) for i in range(n)])
        if c_i is None:
            return self.backbone.denoise(z_t, t, c_t)
        return self.backbone.denoise(z_t, t, c_t, self.control_output(z_t, t, c_t, c_i))

    def trainable_parameters(self):
        return [p for p in self.control.parameters() if p.requires_grad]
