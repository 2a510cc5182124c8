"""Image/pixel AUROC and (saturated) per-region-overlap metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .datasets import DefectAnnotation, preprocess
from .errors import ShapeError

REPORT_KEYS = (
    "image_auroc",
    "image_auroc_logical",
    "image_auroc_structural",
    "pixel_auroc",
    "aupro_0.30",
    "spro_0.05",
)


@dataclass(frozen=True)
class LabeledScore:
    score: float
    anomalous: bool
    category: str = ""


def roc_auc(scores, labels) -> float:
    """Probability that an anomalous score beats a normal one, ties counting half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs at least one normal and one anomalous score")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_labeled(items) -> float:
    items = list(items)
    return roc_auc([i.score for i in items], [i.anomalous for i in items])


def pixel_roc_auc(maps, gt_masks) -> float:
    maps, gt_masks = list(maps), list(gt_masks)
    for m, g in zip(maps, gt_masks):
        if np.shape(m) != np.shape(g):
            raise ShapeError(f"map shape {np.shape(m)} != mask shape {np.shape(g)}")
    return roc_auc(np.concatenate([np.ravel(m) for m in maps]),
                   np.concatenate([np.ravel(g).astype(bool) for g in gt_masks]))


def _pro_inputs(maps, regions):
    """Flatten maps into normal-pixel scores and per-region (scores, saturation)."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    regions = list(regions)
    if len(maps) != len(regions):
        raise ShapeError(f"{len(maps)} maps but {len(regions)} region lists")
    normal, region_scores, sats = [], [], []
    for m, regs in zip(maps, regions):
        covered = np.zeros(m.shape, dtype=bool)
        for r in regs:
            mask = r.mask if isinstance(r, DefectAnnotation) else np.asarray(r, dtype=bool)
            if mask.shape != m.shape:
                raise ShapeError(f"region shape {mask.shape} != map shape {m.shape}")
            sat = r.saturation_area if isinstance(r, DefectAnnotation) else float(mask.sum())
            region_scores.append(m[mask])
            sats.append(sat)
            covered |= mask
        normal.append(m[~covered])
    normal = np.concatenate(normal) if normal else np.zeros(0)
    if not region_scores:
        raise ValueError("need at least one defect region")
    if normal.size == 0:
        raise ValueError("no normal pixels: false positive rate is undefined")
    return normal, region_scores, np.asarray(sats, dtype=np.float64)


def pro_curve(maps, regions):
    """(fpr, overlap) at every distinct score threshold, from (0, 0) upwards.

    ``regions`` holds, per map, a list of boolean masks (plain per-region
    overlap) or :class:`DefectAnnotation` objects (saturated overlap).
    A pixel counts as detected when its score is >= the threshold.
    """
    normal, region_scores, sats = _pro_inputs(maps, regions)
    n_regions = len(region_scores)
    # per-pixel increments of min(1, covered / saturation) when pixels are
    # taken in descending score order inside their region
    inc_scores, incs, full = [], [], []
    for sc, sat in zip(region_scores, sats):
        k = np.arange(len(sc) + 1)
        frac = np.minimum(1.0, k / sat)
        inc_scores.append(np.sort(sc)[::-1])
        incs.append(np.diff(frac))
        # marks the pixel at which the region becomes fully covered
        full.append(np.diff((frac >= 1.0).astype(np.int64)))
    r_scores = np.concatenate(inc_scores)
    r_incs = np.concatenate(incs)

    thresholds = np.unique(np.concatenate([normal, r_scores]))[::-1]
    order = np.argsort(-r_scores, kind="stable")
    r_sorted = r_scores[order]
    r_cum = np.concatenate([[0.0], np.cumsum(r_incs[order].astype(np.longdouble))]).astype(np.float64)
    n_full = np.concatenate([[0], np.cumsum(np.concatenate(full)[order])])
    # number of region pixels with score >= t
    n_r = np.searchsorted(-r_sorted, -thresholds, side="right")
    # exact 1 once every region is covered, whatever the rounding of the sum
    pro = np.where(n_full[n_r] == n_regions, 1.0, r_cum[n_r] / n_regions)

    n_sorted = np.sort(normal)[::-1]
    n_n = np.searchsorted(-n_sorted, -thresholds, side="right")
    fpr = n_n / normal.size
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], np.minimum(pro, 1.0)])


def area_to_limit(fpr, pro, limit: float) -> float:
    """Trapezoid area under the polyline up to ``limit`` (unnormalized)."""
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"fpr limit must lie in (0, 1], got {limit}")
    fpr = np.asarray(fpr, dtype=np.float64)
    pro = np.asarray(pro, dtype=np.float64)
    keep = fpr <= limit
    x, y = fpr[keep], pro[keep]
    if not keep.all():
        i = int(np.argmax(~keep))  # first point past the limit
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], pro[i - 1], pro[i]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        x, y = np.append(x, limit), np.append(y, y_lim)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def aupro(maps, regions, fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over FPR in [0, limit], divided by the limit."""
    fpr, pro = pro_curve(maps, regions)
    return area_to_limit(fpr, pro, fpr_limit) / fpr_limit


def spro(maps, annotations, fpr_limit: float = 0.05) -> float:
    """Saturated per-region overlap; regions are :class:`DefectAnnotation` lists."""
    for anns in annotations:
        for a in anns:
            if not isinstance(a, DefectAnnotation):
                raise TypeError("spro needs DefectAnnotation regions")
    return aupro(maps, annotations, fpr_limit)


# -- evaluation protocol --------------------------------------------------------------

def evaluate_maps(maps: dict, samples, scores: dict | None = None) -> dict:
    """Metrics report from per-image maps (dict image_id -> H x W array)."""
    test = [s for s in samples if s.split == "test"]
    if not test:
        raise ValueError("no test samples")
    scores = scores or {s.image_id: float(np.max(maps[s.image_id])) for s in test}
    good = [s for s in test if s.label == "good"]

    def img_auc(label=None):
        sel = good + [s for s in test if s.label != "good" and (label is None or s.label == label)]
        return roc_auc([scores[s.image_id] for s in sel], [s.label != "good" for s in sel])

    full_maps = [np.asarray(maps[s.image_id], dtype=np.float64) for s in test]
    gts = [np.any([a.mask for a in s.annotations], axis=0) if s.annotations
           else np.zeros(s.pixels.shape[:2], dtype=bool) for s in test]
    anns = [s.annotations for s in test]
    return {
        "image_auroc": img_auc(),
        "image_auroc_logical": img_auc("logical_anomaly"),
        "image_auroc_structural": img_auc("structural_anomaly"),
        "pixel_auroc": pixel_roc_auc(full_maps, gts),
        "aupro_0.30": aupro(full_maps, [[a.mask for a in x] for x in anns], 0.30),
        "spro_0.05": spro(full_maps, anns, 0.05),
    }


def score_samples(model, stats, samples, image_size: int, sigmoid: bool = True):
    """Score every test sample; return ``(maps, anomaly_maps)`` keyed by image id."""
    from .scorer import score_image, upsample

    maps, amaps = {}, {}
    for s in samples:
        if s.split != "test":
            continue
        amap, _ = score_image(model, stats, preprocess(s.pixels, image_size), sigmoid=sigmoid)
        h, w = s.pixels.shape[:2]
        v = amap.values if amap.values.shape == (h, w) else upsample(amap.values, h, w)
        maps[s.image_id] = v
        amaps[s.image_id] = amap
    return maps, amaps


def evaluate(model, stats, samples, image_size: int, sigmoid: bool = True) -> dict:
    maps, _ = score_samples(model, stats, samples, image_size, sigmoid)
    return evaluate_maps(maps, samples)


def oracle_maps(samples) -> dict:
    """Ground-truth masks used as anomaly maps (every metric should be 1)."""
    out = {}
    for s in samples:
        if s.split != "test":
            continue
        m = np.zeros(s.pixels.shape[:2])
        for a in s.annotations:
            m[a.mask] = 1.0
        out[s.image_id] = m
    return out


def format_report(report: dict, category: str = "") -> str:
    title = f"metrics ({category})" if category else "metrics"
    width = max(len(k) for k in report)
    lines = [title, "-" * (width + 10)]
    lines += [f"{k:<{width}}  {v:7.4f}" for k, v in report.items()]
    return "\n".join(lines) + "\n"


def report_json(report: dict, category: str = "pegboard") -> str:
    return json.dumps({"category": category, "metrics": report}, indent=2, sort_keys=True) + "\n"
