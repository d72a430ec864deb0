"""Procedural stand-in for hand-image training pairs.

Each sample is a palm disc with 3 to 5 capsule fingers, placed, scaled and
rotated at random.  The silhouette is the condition image (standing in for a
hand-mesh render) and the ground-truth mask; the target "photo" composites a
skin-toned, shaded version of the same silhouette over a smooth textured
background.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..pnm import write_pnm

EXTENT = 64
SCALE_RANGE = (7.0, 10.0)
FINGER_RANGE = (3, 5)
FINGER_LENGTH = 1.3  # times palm radius
FINGER_WIDTH = 0.32  # times palm radius
N_KEYPOINTS = 6  # palm centre plus five finger tips
# A pixel is skin when red exceeds the first value and red minus blue the
# second.  Backgrounds keep red below 0.3 + 2 * 0.08 + 0.05 = 0.51.
SKIN_THRESHOLDS = (0.6, 0.15)

# Bounds on foreground pixel count implied by the parameter ranges: a lone
# palm at minimum scale (disc area less a rim of discretization), and a full
# five-finger hand at maximum scale with every finger disjoint from the palm.
_r_min, _r_max = SCALE_RANGE
FOREGROUND_BOUNDS = (
    int(math.pi * (_r_min - 1.0) ** 2),
    int(math.ceil(math.pi * (_r_max + 1.0) ** 2
                  + 5 * (2 * FINGER_WIDTH * _r_max + 2.0) * (FINGER_LENGTH * _r_max + 2 * FINGER_WIDTH * _r_max + 2.0))),
)

SUBJECTS = ("person", "man", "woman", "child", "player", "chef")
VERBS = ("holding", "grasping", "gripping", "waving", "pointing", "touching", "reaching", "lifting")
OBJECTS = ("cup", "phone", "ball", "umbrella", "book", "bottle", "racket", "apple")
HANDS = ("one hand", "his hand", "her hand", "both hands", "an open hand")
PLACES = ("in a kitchen", "in the park", "at the beach", "on a street", "in a room", "near a window")


@dataclass(frozen=True)
class HandParams:
    cx: float
    cy: float
    scale: float
    fingers: int
    rotation: float


def sample_params(rng, extent=EXTENT):
    scale = float(rng.uniform(*SCALE_RANGE))
    reach = scale * (1.0 + FINGER_LENGTH + FINGER_WIDTH) + 1.0
    margin = min(reach, extent / 2 - 1)
    return HandParams(
        cx=float(rng.uniform(margin, extent - margin)),
        cy=float(rng.uniform(margin, extent - margin)),
        scale=scale,
        fingers=int(rng.integers(FINGER_RANGE[0], FINGER_RANGE[1] + 1)),
        rotation=float(rng.uniform(-math.pi, math.pi)),
    )


def _finger_angles(p):
    spread = math.radians(25.0)
    k = p.fingers
    return [p.rotation + (i - (k - 1) / 2) * spread for i in range(k)]


def render_silhouette(p, extent=EXTENT):
    """Binary [extent x extent] mask of the toy hand, sampled at pixel centres."""
    ys, xs = np.mgrid[0:extent, 0:extent] + 0.5
    mask = (xs - p.cx) ** 2 + (ys - p.cy) ** 2 <= p.scale ** 2
    half_w = FINGER_WIDTH * p.scale
    for ang in _finger_angles(p):
        # finger axis runs from 0.7 r to (0.7 + L) r along direction ang ("up" = -y)
        dx, dy = math.sin(ang), -math.cos(ang)
        ax, ay = p.cx + 0.7 * p.scale * dx, p.cy + 0.7 * p.scale * dy
        length = FINGER_LENGTH * p.scale
        px, py = xs - ax, ys - ay
        along = np.clip(px * dx + py * dy, 0.0, length)
        dist2 = (px - along * dx) ** 2 + (py - along * dy) ** 2
        mask |= dist2 <= half_w ** 2
    return mask


def keypoints(p):
    """Palm centre and finger tips as [6 x 2] (x, y) plus a visibility mask."""
    pts = np.zeros((N_KEYPOINTS, 2))
    vis = np.zeros(N_KEYPOINTS, dtype=bool)
    pts[0] = (p.cx, p.cy)
    vis[0] = True
    reach = (0.7 + FINGER_LENGTH) * p.scale
    for i, ang in enumerate(_finger_angles(p)):
        pts[i + 1] = (p.cx + reach * math.sin(ang), p.cy - reach * math.cos(ang))
        vis[i + 1] = True
    return pts, vis


def render_target(p, mask, rng, extent=EXTENT):
    """[3 x extent x extent] RGB target: textured background plus shaded hand."""
    ys, xs = np.mgrid[0:extent, 0:extent] / extent
    # red stays low so that skin is separable by colour (see SKIN_THRESHOLDS)
    base = rng.uniform(0.05, 0.45, size=3)
    base[0] = rng.uniform(0.05, 0.3)
    tilt = rng.uniform(-0.08, 0.08, size=(3, 2))
    freq = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.05 * np.sin(2 * math.pi * freq * (xs + ys) + phase)
    bg = base[:, None, None] + tilt[:, 0, None, None] * xs + tilt[:, 1, None, None] * ys + stripes
    skin = np.array([0.93, 0.76, 0.62]) * rng.uniform(0.85, 1.05)
    r = np.sqrt((xs * extent + 0.5 - p.cx) ** 2 + (ys * extent + 0.5 - p.cy) ** 2)
    shade = 1.0 - 0.15 * np.clip(r / (2.5 * p.scale), 0.0, 1.0)
    hand = skin[:, None, None] * shade
    img = np.where(mask[None], hand, bg)
    return np.clip(img, 0.0, 1.0)


def skin_mask(img):
    """Boolean [H, W] mask of skin-coloured pixels in an RGB image."""
    img = np.asarray(img)
    red_min, gap = SKIN_THRESHOLDS
    return (img[0] > red_min) & (img[0] - img[2] > gap)


def make_prompt(rng):
    pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731
    return (f"a {pick(SUBJECTS)} {pick(VERBS)} a {pick(OBJECTS)} with {pick(HANDS)} "
            f"{pick(PLACES)}")


@dataclass
class SyntheticSample:
    target: np.ndarray
    condition: np.ndarray
    prompt: str
    mask: np.ndarray
    keypoints: np.ndarray
    visible: np.ndarray
    params: HandParams


def make_sample(seed, index, extent=EXTENT):
    rng = np.random.default_rng([int(seed), int(index)])
    p = sample_params(rng, extent)
    mask = render_silhouette(p, extent)
    target = render_target(p, mask, rng, extent)
    prompt = make_prompt(rng)
    pts, vis = keypoints(p)
    return SyntheticSample(target, mask[None].astype(np.float64), prompt, mask, pts, vis, p)


def gen_synthetic(count, seed, out_dir, extent=EXTENT):
    """Write ``count`` samples plus ``manifest.jsonl`` into ``out_dir``.

    Returns the list of manifest records.  Each sample uses its own
    generator seeded by ``(seed, index)``, so output does not depend on
    generation order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        s = make_sample(seed, i, extent)
        names = {"image": f"target_{i:05d}.ppm", "condition": f"cond_{i:05d}.pgm", "mask": f"mask_{i:05d}.pgm"}
        write_pnm(out / names["image"], s.target)
        write_pnm(out / names["condition"], s.condition)
        write_pnm(out / names["mask"], s.mask.astype(np.float64))
        records.append({
            "index": i,
            **names,
            "prompt": s.prompt,
            "params": {k: round(v, 6) if isinstance(v, float) else v for k, v in asdict(s.params).items()},
            "keypoints": [[round(float(x), 6), round(float(y), 6)] for x, y in s.keypoints],
            "visible": [bool(v) for v in s.visible],
        })
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
