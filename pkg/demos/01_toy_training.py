"""Train the control branch on synthetic hands, then sample and score.

Takes about five minutes on one core.  Outputs land in ``runs/toy``.
"""

import json
from pathlib import Path

from sesa.harness.config import RunConfig
from sesa.harness.synthetic import gen_synthetic, load_manifest
from sesa.harness.train import train
from sesa.harness.checkpoint import build_model
from sesa.harness.workflows import evaluate, sample_image, sidecar, write_sample
from sesa.pnm import read_pnm

root = Path("runs/toy")
cfg = RunConfig.load(Path(__file__).with_name("toy.cfg"))

# 200 training pairs, plus 12 held-out conditions drawn from a different seed
gen_synthetic(200, cfg["seed"], root / "data")
gen_synthetic(12, cfg["seed"] + 1000, root / "heldout")

result = train(cfg, root / "data", root / "ckpt")
print(f"loss {result.initial_loss:.1f} -> {result.final_loss:.1f} "
      f"({result.final_loss / result.initial_loss:.2f} of initial)")

untrained = build_model(cfg)
held = load_manifest(root / "heldout" / "manifest.jsonl")
for name, model in (("trained", result.model), ("untrained", untrained)):
    for i, rec in enumerate(held):
        cond = read_pnm(root / "heldout" / rec["condition"])
        img = sample_image(model, cfg, cond, rec["prompt"], seed=i)
        write_sample(root / name / f"gen_{i:05d}.ppm", img, sidecar(cfg, i, rec["prompt"], cfg["sample.steps"]))
    report = evaluate(root / name, root / "heldout", cfg)
    print(name, json.dumps(report.values, sort_keys=True))

# align is the fraction of pixels where the generated skin mask and the
# condition silhouette disagree; training should bring it down
