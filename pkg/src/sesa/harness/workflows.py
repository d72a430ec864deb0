"""Sampling, evaluation, attention dumps and timing, shared by the CLI and demos."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import metrics as M
from .. import tensor as T
from ..backbone import decode_latent, sample
from ..enhance import attention_mass, tag_hand_tokens
from ..errors import ConfigError, DataError
from ..fusion import AttentionPyramid, aggregate
from ..pnm import read_pnm, write_pnm
from .synthetic import skin_mask
from .train import schedule_for


def sample_image(model, cfg, condition, prompt, seed, steps=None):
    """Generate one [3, H, W] image for a condition image and a prompt."""
    sched = schedule_for(cfg)
    steps = cfg["sample.steps"] if steps is None else steps
    c_t = model.backbone.embed(prompt)
    rng = T.make_rng(seed)
    z = sample(sched, model, c_t, model.config.latent_shape, steps, rng, c_f=condition)
    return decode_latent(z.data)


def sidecar(cfg, seed, prompt, steps, **extra):
    info = {
        "seed": int(seed),
        "alpha": cfg.alpha,
        "index_rule": cfg["enhance.index_rule"],
        "fusion": {"enabled": cfg["fusion.enabled"], "normalize": cfg["fusion.normalize"],
                   "per_level": cfg["fusion.per_level"], "transpose": cfg["fusion.transpose"]},
        "steps": steps,
        "prompt": prompt,
    }
    info.update(extra)
    return info


def write_sample(out_path, image, info):
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(out_path, image)
    out_path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def alignment_error(image, condition):
    """Mean absolute difference between the image's skin mask and the condition silhouette."""
    cond = np.asarray(condition)
    cond = cond.mean(axis=0) if cond.ndim == 3 else cond
    return float(np.abs(skin_mask(image).astype(np.float64) - (cond > 0.5)).mean())


# ---------------------------------------------------------------- evaluation

def _images(directory, suffix):
    files = sorted(Path(directory).glob(f"*{suffix}"))
    if not files:
        raise DataError(f"{directory}: no {suffix} images")
    return files


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _mask_boxes(ref_dir, count):
    """One (x, y, w, h) bounding box per reference mask, in sorted order."""
    masks = sorted(Path(ref_dir).glob("mask_*.pgm"))
    if len(masks) < count:
        raise ConfigError("hand-crop metrics need a crops file or mask_*.pgm files in the reference directory")
    boxes = []
    for path in masks[:count]:
        m = read_pnm(path)[0] > 0.5
        if not m.any():
            raise DataError(f"{path}: empty mask")
        ys, xs = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
        boxes.append([[int(xs[0]), int(ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1)]])
    return boxes


def evaluate(generated_dir, reference_dir, cfg, crops=None, detections=None, keypoints=None, features=None):
    """Compute the configured metrics and return a MetricReport.

    Generated and reference ``*.ppm`` files are paired in sorted order.
    ``crops`` is a JSON-lines file with one ``{"boxes": [[x, y, w, h], ...]}``
    line per generated image (boxes are applied to both sets); without it,
    boxes come from ``mask_*.pgm`` files next to the references.
    ``detections`` holds ``{"confidences": [...]}`` per image and
    ``keypoints`` holds ``{"pred", "gt", "visible"}`` per image.
    ``features`` is an optional pair of tensor-container paths with
    externally computed embeddings; FID and KID then use those instead of
    the configured embedder.
    """
    gen_files = _images(generated_dir, ".ppm")
    ref_files = _images(reference_dir, ".ppm")
    gen = [read_pnm(p) for p in gen_files]
    ref = [read_pnm(p) for p in ref_files]
    embedder = M.EMBEDDERS[cfg["eval.embedder"]]()
    kid_args = {"subset_size": cfg["eval.kid_subset"] or None, "subsets": cfg["eval.kid_subsets"], "seed": cfg["seed"]}
    report = M.MetricReport()
    wanted = cfg["eval.metrics"]
    unknown = [k for k in wanted if k not in M.METRIC_KEYS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}")

    if "fid" in wanted or "kid" in wanted:
        if features:
            fa, fb = (M.FeatureSet.load(p) for p in features)
        else:
            fa = M.image_features(gen, embedder, "generated")
            fb = M.image_features(ref, embedder, "reference")
        if "fid" in wanted:
            report.add("fid", M.fid(fa, fb), min(fa.n, fb.n))
        if "kid" in wanted:
            report.add("kid", M.kid(fa, fb, **kid_args), min(fa.n, fb.n))
    if "fid_h" in wanted or "kid_h" in wanted:
        n = min(len(gen), len(ref))
        boxes = [line["boxes"] for line in _read_jsonl(crops)] if crops else _mask_boxes(reference_dir, n)
        if len(boxes) < n:
            raise DataError(f"{len(boxes)} crop lines for {n} image pairs")
        fa = M.crop_features(gen[:n], boxes[:n], embedder, "generated hands")
        fb = M.crop_features(ref[:n], boxes[:n], embedder, "reference hands")
        if "fid_h" in wanted:
            report.add("fid_h", M.fid(fa, fb), fa.n)
        if "kid_h" in wanted:
            report.add("kid_h", M.kid(fa, fb, **kid_args), fa.n)
    if "hand_conf" in wanted:
        if not detections:
            raise ConfigError("hand_conf needs a detections file")
        dets = [line["confidences"] for line in _read_jsonl(detections)]
        report.add("hand_conf", M.hand_confidence(dets), len(dets))
    for key in ("mse_2d", "mse_3d"):
        if key in wanted:
            if not keypoints:
                raise ConfigError(f"{key} needs a keypoints file")
            rows = _read_jsonl(keypoints)
            dim = 2 if key == "mse_2d" else 3
            pred = np.array([np.asarray(r["pred"])[:, :dim] for r in rows])
            gt = np.array([np.asarray(r["gt"])[:, :dim] for r in rows])
            vis = np.array([r.get("visible", [True] * len(r["gt"])) for r in rows])
            if pred.shape[-1] != dim:
                raise DataError(f"{key} needs {dim}-D keypoints")
            report.add(key, M.keypoint_mse(pred, gt, vis), int(vis.sum()))
    if "align" in wanted:
        conds = sorted(Path(reference_dir).glob("cond_*.pgm"))
        n = min(len(gen), len(conds))
        if n == 0:
            raise ConfigError("align needs cond_*.pgm files in the reference directory")
        errs = [alignment_error(g, read_pnm(c)) for g, c in zip(gen[:n], conds[:n])]
        report.add("align", float(np.mean(errs)), n)
    return report


# ---------------------------------------------------------------- attention maps

def _scaled(mat):
    mat = np.asarray(mat, dtype=np.float64)
    top = mat.max()
    return mat / top if top > 0 else mat


def dump_attention(model, condition, prompt, t, seed, out_dir, cross_dir=None):
    """Write the control branch's attention maps as PGM heatmaps plus ``index.json``.

    Self-attention maps ψ_r are written whole ([r² x r²], each scaled to
    its maximum), followed by the fused map ψ' at the middle resolution.
    With ``cross_dir`` every prompt token also gets an r x r map of the
    attention it receives at each layer, indexed with its attention mass
    in ``cross_dir/index.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = T.make_rng(seed)
    z_t = T.Tensor(rng.standard_normal(model.config.latent_shape))
    c_t = model.backbone.embed(prompt)
    with T.no_grad():
        ctrl = model.control_output(z_t, int(t), c_t, condition)
    entries = []
    for r in sorted(ctrl.self_maps, reverse=True):
        name = f"self_{r:02d}.pgm"
        m = ctrl.self_maps[r].data
        write_pnm(out / name, _scaled(m)[None])
        entries.append({"file": name, "kind": "self", "resolution": r, "shape": list(m.shape)})
    target = min(ctrl.self_maps)
    psi = aggregate(AttentionPyramid(dict(ctrl.self_maps)), target).data
    write_pnm(out / "fused.pgm", _scaled(psi)[None])
    entries.append({"file": "fused.pgm", "kind": "fused", "resolution": target, "shape": list(psi.shape)})
    index = {"prompt": prompt, "t": int(t), "seed": int(seed), "maps": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cross_dir is not None:
        cross = Path(cross_dir)
        cross.mkdir(parents=True, exist_ok=True)
        hand = tag_hand_tokens(c_t.token_strings, model.index_rule).index_list
        centries = []
        for tag, m in ctrl.cross_maps.items():
            m = m.data
            r = int(round(m.shape[0] ** 0.5))
            for j, word in enumerate(c_t.token_strings):
                name = f"cross_{tag}_{j:02d}.pgm"
                write_pnm(cross / name, _scaled(m[:, j].reshape(r, r))[None])
                centries.append({"file": name, "layer": tag, "resolution": r, "token": word,
                                 "token_index": j, "mass": attention_mass(m, [j])})
        cindex = {"prompt": prompt, "t": int(t), "seed": int(seed), "hand_tokens": hand,
                  "hand_mass": {tag: attention_mass(m, hand) for tag, m in ctrl.cross_maps.items()},
                  "maps": centries}
        (cross / "index.json").write_text(json.dumps(cindex, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        index["cross"] = cindex
    return index


# ---------------------------------------------------------------- timing

def bench(model, cfg, repeats=3, seed=0):
    """Wall-clock seconds for one forward pass, one training step and one sampling step."""
    from ..backbone import training_loss

    rng = T.make_rng(seed)
    shape = model.config.latent_shape
    extent = model.config.image_extent
    cond = (rng.random((1, extent, extent)) > 0.5).astype(np.float64)
    c_t = model.backbone.embed("a person holding a cup with one hand")
    sched = schedule_for(cfg)
    z = T.Tensor(rng.standard_normal(shape))
    params = model.trainable_parameters()

    def forward():
        with T.no_grad():
            model(z, 500, c_t, cond)

    def train_step():
        loss = training_loss([(z, c_t, cond)], sched, model, rng)
        T.backward(loss, params)

    timings = {}
    for name, fn in (("forward_s", forward), ("train_step_s", train_step)):
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    model.control.zero_grad()
    timings["sample_s_per_step"] = timings["forward_s"]
    timings["parameters_trainable"] = int(sum(p.size for p in params))
    timings["parameters_total"] = int(sum(p.size for p in model.backbone.parameters())) + timings["parameters_trainable"]
    return timings
