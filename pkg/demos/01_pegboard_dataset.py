"""Generate the synthetic pegboard category and look at what each split contains.

Normal boards hold four coloured squares, one per quadrant, each inside its
legal area, with a colour pairing between the top and bottom rows. Logical
anomalies break exactly one of those rules; structural ones add a scratch or
a blot to an otherwise valid board.

    python3 demos/01_pegboard_dataset.py [out_dir]
"""
import sys
from collections import Counter
from pathlib import Path

import numpy as np
from PIL import Image

from dfscad.datasets import MiniLocoSpec, gen_mini_loco, load_loco_layout

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pegboard")
spec = MiniLocoSpec.fast(seed=0)
samples = gen_mini_loco(spec, out)
print(f"generated {len(samples)} images at {spec.canvas}x{spec.canvas} under {out}")
for (split, label), n in sorted(Counter((s.split, s.label) for s in samples).items()):
    print(f"  {split:<11} {label:<19} {n}")

# The generator's in-memory index and the on-disk layout agree exactly.
loaded = {s.image_id: s for s in load_loco_layout(out)}
assert all(s.same_as(loaded[s.image_id]) for s in samples)
print("reloaded the directory tree: identical to the generated index")

# One row per anomaly subtype: the image next to its ground-truth mask.
rows = []
for kind in spec.logical_kinds + spec.structural_kinds:
    s = next(x for x in samples if x.subtype == kind)
    mask = np.zeros(s.pixels.shape[:2], bool)
    for a in s.annotations:
        mask |= a.mask
    gt = np.repeat((mask * 255).astype(np.uint8)[..., None], 3, axis=2)
    rows.append(np.concatenate([s.pixels, gt], axis=1))
    print(f"  {kind:<10} -> mask covers {int(mask.sum())} px, saturation {s.annotations[0].saturation_area:g} px")
sheet = np.concatenate(rows, axis=0)
Image.fromarray(sheet).resize((sheet.shape[1] * 3, sheet.shape[0] * 3), Image.NEAREST).save(out / "contact_sheet.png")
print(f"contact sheet: {out / 'contact_sheet.png'}")
