"""Train the triplet on normal pegboards, calibrate, and score the test split.

Uses the fast 64 px profile and 2000 steps, about a minute and a half on one
core. Much shorter runs stay near chance: the warmup has barely ramped.

    python3 demos/03_train_and_score.py [iterations] [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from dfscad import config
from dfscad.cli import eval_run, train_run
from dfscad.datasets import MiniLocoSpec, gen_mini_loco, load_loco_layout, preprocess
from dfscad.metrics import format_report
from dfscad.plotting import panel
from dfscad.scorer import calibrate, score_image

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/train")

data = out / "data"
if not (data / "inventory.csv").exists():
    gen_mini_loco(MiniLocoSpec.fast(seed=0), data)
samples = load_loco_layout(data)

rc = config.resolve({"profile": "fast", "iterations": iterations})
print(f"training {iterations} steps, C={rc.channels}, {rc.image_size}px, margin {rc.margin}")
model = train_run(rc, samples, out / "run")
print(format_report(eval_run(model, samples, sigmoid=True), "pegboard"))

# Where does the map peak on a board with a missing square?
stats = calibrate(model, [preprocess(s.pixels, 64) for s in samples if s.split == "validation"])
s = next(x for x in samples if x.subtype == "missing")
amap, score = score_image(model, stats, preprocess(s.pixels, 64))
y, x = np.unravel_index(np.argmax(amap.values), amap.values.shape)
inside = bool(s.annotations[0].mask[y, x])
print(f"{s.image_id}: score {score:.3f}, peak at ({y}, {x}), inside the legal area: {inside}")

Image.fromarray(panel(s.pixels, s.annotations[0].mask, amap.values)).save(out / "missing_square.png")
print(f"panel: {out / 'missing_square.png'}")
