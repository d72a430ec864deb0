"""Hierarchical fusion of multi-resolution self-attention maps.

Each self-attention map ψ_r is [r² x r²]: row ``q`` is the attention of
spatial location ``q`` over all key locations, both flattened row-major on an
r x r grid.  Maps are max-pooled to a common resolution (independently over
the query grid and the key grid), summed, and used as a mixing operator on
the control features.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import EmptyPyramid, ResolutionMismatch, ShapeMismatch


@dataclass(frozen=True)
class FusionConfig:
    """Switches for the fusion stage.

    normalize: renormalize the summed map's rows to sum to one before mixing.
    per_level: refine every control feature with a map pooled to its own
        resolution, instead of only the middle-block feature.
    transpose: mix with ψ' instead of ψ'ᵀ (output indexed by key).
    """

    enabled: bool = True
    normalize: bool = True
    per_level: bool = False
    transpose: bool = False


@dataclass
class AttentionPyramid:
    maps: dict
    target_resolution: int = None

    def __post_init__(self):
        if not self.maps:
            raise EmptyPyramid("attention pyramid has no maps")
        res = sorted(self.maps, reverse=True)
        if any(b * 2 != a for a, b in zip(res, res[1:])):
            raise ResolutionMismatch(f"resolutions {res} are not a halving chain")
        for r, m in self.maps.items():
            if m.shape != (r * r, r * r):
                raise ShapeMismatch(f"map at resolution {r} has shape {m.shape}")
        if self.target_resolution is None:
            self.target_resolution = res[-1]


def _side(psi):
    r = int(round(psi.shape[0] ** 0.5))
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1] or r * r != psi.shape[0]:
        raise ShapeMismatch(f"attention map must be [r^2 x r^2], got {psi.shape}")
    return r


def pool_map(psi, target):
    """Max-pool an [r² x r²] map to [t² x t²] with window r/t on all four grid axes."""
    r = _side(psi)
    if target > r or r % target or (r // target) & (r // target - 1):
        raise ResolutionMismatch(f"cannot pool resolution {r} to {target}")
    k = r // target
    if k == 1:
        return psi
    grid = T.reshape(psi, (r, r, r, r))  # (qy, qx, ky, kx)
    grid = T.maxpool2d(grid, k)  # keys pooled
    grid = T.permute(grid, (2, 3, 0, 1))  # (ky, kx, qy, qx)
    grid = T.maxpool2d(grid, k)  # queries pooled
    grid = T.permute(grid, (2, 3, 0, 1))
    return T.reshape(grid, (target * target, target * target))


def aggregate(pyramid, target=None):
    """Sum of every map at or above ``target`` resolution, pooled to ``target``."""
    target = pyramid.target_resolution if target is None else target
    total = None
    for r in sorted(pyramid.maps, reverse=True):
        if r < target:
            continue
        pooled = pool_map(pyramid.maps[r], target)
        total = pooled if total is None else T.add(total, pooled)
    if total is None:
        raise EmptyPyramid(f"no map at or above resolution {target}")
    return total


def refine(f_c, psi_prime, transpose=False):
    """Mix the spatial locations of ``f_c`` [C, t, t] with ψ' [t² x t²].

    Output location ``i`` is Σ_j f_c[:, j] · ψ'[i, j]; with ``transpose`` it
    is Σ_j f_c[:, j] · ψ'[j, i].
    """
    c, h, w = f_c.shape
    if psi_prime.shape != (h * w, h * w):
        raise ShapeMismatch(f"feature {f_c.shape} cannot be mixed by map {psi_prime.shape}")
    flat = T.reshape(f_c, (c, h * w))
    mix = psi_prime if transpose else T.transpose(psi_prime)
    return T.reshape(T.matmul(flat, mix), (c, h, w))


def fuse(features, self_maps, cfg=FusionConfig(), psi_override=None):
    """Refine control features with the aggregated self-attention map.

    ``features`` are the per-level control features ending with the middle
    block; ``self_maps`` maps resolution to ψ_r.  Returns a new list; untouched
    levels are passed through as the same objects.
    """
    if not cfg.enabled:
        return list(features)
    pyramid = AttentionPyramid(dict(self_maps))
    out = list(features)
    idx = range(len(out)) if cfg.per_level else [len(out) - 1]
    for i in idx:
        f = out[i]
        res = f.shape[1]
        if psi_override is not None:
            psi = psi_override
        else:
            psi = aggregate(pyramid, res)
            if cfg.normalize:
                psi = T.normalize_rows(psi)
        out[i] = refine(f, psi, cfg.transpose)
    return out
