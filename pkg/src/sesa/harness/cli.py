"""``sesa`` command line.

Exit status: 0 success, 2 usage error, 3 data error, 4 numeric error,
5 network error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from ..control import ConditionImage
from ..errors import SesaError
from .checkpoint import MODEL_FILE
from .config import RunConfig

log = logging.getLogger("sesa")


def _on_off(text):
    low = text.lower()
    if low in ("on", "true", "1"):
        return True
    if low in ("off", "false", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _inference_overrides(args):
    over = {}
    if getattr(args, "fusion", None) is not None:
        over["fusion.enabled"] = args.fusion
    if getattr(args, "hand_bias_alpha", None) is not None:
        over["enhance.alpha"] = args.hand_bias_alpha
        over["enhance.enabled"] = True
    return over


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    from .synthetic import gen_synthetic

    count = cfg["data.count"] if args.count is None else args.count
    records = gen_synthetic(count, cfg["seed"], args.out)
    print(f"wrote {len(records)} samples to {args.out}")


def cmd_train(args, cfg):
    from .train import train

    if args.resume:
        resumed = RunConfig.load(Path(args.resume) / "config.cfg")
        cfg = RunConfig({**resumed.values, "seed": cfg["seed"] if args.seed is not None else resumed["seed"]})
    changes = {}
    if args.epochs is not None:
        changes["train.epochs"] = args.epochs
    if args.limit is not None:
        changes["train.limit"] = args.limit
    changes.update(_inference_overrides(args))
    if changes:
        cfg = RunConfig({**cfg.values, **changes})
    result = train(cfg, args.data, args.out, resume=args.resume)
    print(json.dumps({"epochs": result.epoch, "initial_loss": result.initial_loss,
                      "final_loss": result.final_loss}, sort_keys=True))


def _extracted_prompt(args, cfg):
    from .. import semantics as S

    client = S.ChatClient(_fixtures(args, cfg), backoff=cfg["semantics.backoff"])
    endpoints = _endpoints(cfg)
    text = args.prompt
    if args.image:
        text = S.caption(args.image, endpoints.captioner, client)
    record = S.extract(text, S.DEFAULT_FEW_SHOT, endpoints.extractor, client)
    return S.compose(record).final_text


def cmd_sample(args, cfg):
    from .checkpoint import load_checkpoint
    from .workflows import sample_image, sidecar, write_sample

    model, mcfg, _ = load_checkpoint(args.checkpoint, _inference_overrides(args))
    mcfg = RunConfig({**mcfg.values, **{k: v for k, v in cfg.values.items() if k.startswith("semantics.")}})
    prompt = _extracted_prompt(args, mcfg) if args.extract_semantics else args.prompt
    steps = mcfg["sample.steps"] if args.steps is None else args.steps
    cond = ConditionImage.load(args.condition)
    image = sample_image(model, mcfg, cond, prompt, cfg["seed"], steps)
    # content hashes rather than paths, so reruns elsewhere produce the same sidecar
    info = sidecar(mcfg, cfg["seed"], prompt, steps, condition=Path(args.condition).name,
                   condition_sha256=_sha256(args.condition),
                   checkpoint_sha256=_sha256(Path(args.checkpoint) / MODEL_FILE))
    write_sample(args.out, image, info)
    print(f"wrote {args.out}")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_eval(args, cfg):
    from .workflows import evaluate

    if args.metrics:
        cfg = cfg.replace(eval__metrics=tuple(s.strip() for s in args.metrics.split(",") if s.strip()))
    features = (args.gen_features, args.ref_features) if args.gen_features and args.ref_features else None
    report = evaluate(args.generated, args.reference, cfg, args.crops, args.detections, args.keypoints, features)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _fixtures(args, cfg):
    from ..semantics import FixtureTable

    path = getattr(args, "fixtures", None) or cfg["semantics.fixtures"]
    return FixtureTable.load(path) if path else FixtureTable()


def _endpoints(cfg):
    from ..semantics import Endpoints, ModelEndpoint

    def make(role):
        return ModelEndpoint(cfg[f"semantics.{role}_url"], cfg[f"semantics.{role}_model"], role,
                             cfg["semantics.timeout"], cfg["semantics.retries"])

    return Endpoints(make("captioner"), make("extractor"))


def cmd_extract_semantics(args, cfg):
    from .. import semantics as S

    images = []
    for item in args.images:
        p = Path(item)
        images.extend(sorted(q for q in p.iterdir() if q.suffix in (".ppm", ".pgm", ".png", ".jpg")) if p.is_dir() else [p])
    client = S.ChatClient(_fixtures(args, cfg), backoff=cfg["semantics.backoff"])
    entries = S.build_dataset(images, _endpoints(cfg), args.out, client, parallelism=cfg["semantics.parallelism"])
    failed = sum(e["status"] != "ok" for e in entries)
    print(f"wrote {len(entries)} records to {args.out} ({failed} failed)")


def cmd_dump_attn(args, cfg):
    from .checkpoint import load_checkpoint
    from .workflows import dump_attention

    model, _, _ = load_checkpoint(args.checkpoint, _inference_overrides(args))
    cond = ConditionImage.load(args.condition)
    index = dump_attention(model, cond, args.prompt, args.t, cfg["seed"], args.out, args.dump_cross_attn)
    count = len(index["maps"]) + len(index.get("cross", {}).get("maps", []))
    print(f"wrote {count} maps")


def cmd_bench(args, cfg):
    from .checkpoint import build_model, load_checkpoint
    from .workflows import bench

    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(cfg)
    print(json.dumps(bench(model, cfg, args.repeats, cfg["seed"]), indent=2, sort_keys=True))


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="sesa", description="Hand-aware controllable image generation toolkit.")
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--seed", type=int, help="seed for every random draw of the command")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic hand dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the control branch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--resume")
    p.add_argument("--fusion", type=_on_off)
    p.add_argument("--hand-bias-alpha", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate an image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--prompt")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--fusion", type=_on_off)
    p.add_argument("--hand-bias-alpha", type=float)
    p.add_argument("--extract-semantics", action="store_true",
                   help="treat --prompt (or the caption of --image) as a caption and compose the prompt from it")
    p.add_argument("--image", help="photo to caption when --extract-semantics is given")
    p.add_argument("--fixtures")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compare generated and reference images")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.add_argument("--crops")
    p.add_argument("--detections")
    p.add_argument("--keypoints")
    p.add_argument("--gen-features", help="tensor container with a 'features' tensor for the generated set")
    p.add_argument("--ref-features", help="tensor container with a 'features' tensor for the reference set")
    p.add_argument("--metrics", help="comma separated metric keys (overrides eval.metrics)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-semantics", help="caption images and build a prompt manifest")
    p.add_argument("images", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--fixtures")
    p.set_defaults(func=cmd_extract_semantics)

    p = sub.add_parser("dump-attn", help="write attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int, default=500)
    p.add_argument("--dump-cross-attn", metavar="DIR", help="also write cross-attention maps to DIR")
    p.add_argument("--fusion", type=_on_off)
    p.add_argument("--hand-bias-alpha", type=float)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("bench", help="time forward, training and sampling steps")
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "sample" and not args.prompt and not (args.extract_semantics and args.image):
            parser.error("sample needs --prompt (or --extract-semantics with --image)")
        args.func(args, cfg)
    except SesaError as exc:
        print(f"sesa: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sesa: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
