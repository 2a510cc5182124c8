"""Side-by-side input / ground truth / anomaly map panels."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image


def heatmap(values: np.ndarray, cmap: str = "inferno") -> np.ndarray:
    """8-bit RGB rendering of a map with values in [0, 1]."""
    rgba = colormaps[cmap](np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def _gray(mask: np.ndarray) -> np.ndarray:
    return np.repeat((mask.astype(np.uint8) * 255)[..., None], 3, axis=2)


def panel(pixels: np.ndarray, gt: np.ndarray, values: np.ndarray, cmap: str = "inferno", gap: int = 4) -> np.ndarray:
    h = pixels.shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    return np.concatenate([pixels, sep, _gray(gt), sep, heatmap(values, cmap)], axis=1)


def render_panels(entries, samples: dict, out_dir: Path, cmap: str = "inferno") -> int:
    """Write ``<id>_map.png`` and ``<id>_panel.png`` per exported map; return the count."""
    if cmap not in colormaps:
        raise ValueError(f"unknown colormap {cmap!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for entry, values in entries:
        iid = entry["image_id"]
        if iid not in samples:
            raise KeyError(f"map {iid!r} has no image in the dataset")
        s = samples[iid]
        gt = np.zeros(s.pixels.shape[:2], dtype=bool)
        for a in s.annotations:
            gt |= a.mask
        if values.shape != gt.shape:
            raise ValueError(f"{iid}: map shape {values.shape} != image shape {gt.shape}")
        stem = iid.replace("/", "_")
        Image.fromarray(heatmap(values, cmap)).save(out_dir / f"{stem}_map.png")
        Image.fromarray(panel(s.pixels, gt, values, cmap)).save(out_dir / f"{stem}_panel.png")
        n += 1
    return n
