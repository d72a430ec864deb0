"""Fusion plus enhancement on vs off, five seeds, median alignment.

Each seed trains two toy models on the same data and scores samples for
the same held-out conditions.  Roughly fifteen minutes on one core.
"""

import json
import statistics
import sys
from pathlib import Path

from sesa.harness.config import toy_config
from sesa.harness.synthetic import gen_synthetic, load_manifest
from sesa.harness.train import train
from sesa.harness.workflows import evaluate, sample_image, sidecar, write_sample
from sesa.pnm import read_pnm

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/ablation")
rows = {}
for seed in range(5):
    base = root / f"seed_{seed}"
    gen_synthetic(150, seed, base / "data")
    gen_synthetic(12, seed + 1000, base / "ref")
    held = load_manifest(base / "ref" / "manifest.jsonl")
    rows[seed] = {}
    for flag in ("off", "on"):
        # one switch drives both mechanisms so the pair differs in nothing else
        cfg = toy_config(seed=seed, train__epochs=15, fusion__enabled=flag == "on",
                         enhance__enabled=flag == "on", eval__metrics=("fid", "kid", "align"))
        model = train(cfg, base / "data").model
        for i, rec in enumerate(held):
            img = sample_image(model, cfg, read_pnm(base / "ref" / rec["condition"]), rec["prompt"], seed * 100 + i)
            write_sample(base / flag / f"gen_{i:05d}.ppm", img, sidecar(cfg, i, rec["prompt"], cfg["sample.steps"]))
        rows[seed][flag] = evaluate(base / flag, base / "ref", cfg).values
    print(seed, json.dumps(rows[seed], sort_keys=True))

for flag in ("off", "on"):
    print(flag, "median align", statistics.median(r[flag]["align"] for r in rows.values()))
