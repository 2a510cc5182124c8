"""Anomaly maps and image scores from a trained triplet."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, _sigmoid_np, bilinear_resize, quantile
from .errors import ShapeError
from .nets import TripletModel, autoencoder_forward, ema_shadow_forward, teacher_forward

Q_LOW, Q_HIGH = 0.9, 0.995
# largest double below 1; keeps projected values inside the open interval
_BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class BranchStats:
    q_low: float
    q_high: float

    @property
    def degenerate(self) -> bool:
        return not self.q_high > self.q_low


@dataclass(frozen=True)
class CalibrationStats:
    global_: BranchStats
    local: BranchStats

    @property
    def degenerate(self) -> bool:
        return self.global_.degenerate or self.local.degenerate

    def to_dict(self) -> dict:
        return {"global": vars(self.global_), "local": vars(self.local)}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationStats":
        return cls(BranchStats(**d["global"]), BranchStats(**d["local"]))


@dataclass
class AnomalyMap:
    values: np.ndarray
    source_shape: tuple
    branch: str


def _sq_channel_mean(a, b) -> np.ndarray:
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b
    return (d * d).mean(axis=0)


def global_map(s_a, a) -> np.ndarray:
    """Channel mean of squared student/auto-encoder differences."""
    return _sq_channel_mean(s_a, a)


def local_map(t, s_t) -> np.ndarray:
    """Channel mean of squared teacher/student differences."""
    return _sq_channel_mean(t, s_t)


def raw_maps(model: TripletModel, image):
    """``(global, local)`` raw maps at feature resolution, using the EMA student."""
    x = Tensor(np.asarray(image, dtype=np.float32))
    t = teacher_forward(model, x)
    s_t, s_a = ema_shadow_forward(model, x)
    a = autoencoder_forward(model, x)
    return global_map(s_a, a), local_map(t, s_t)


def fit_branch(values) -> BranchStats:
    v = np.concatenate([np.ravel(x) for x in values])
    return BranchStats(quantile(v, Q_LOW), quantile(v, Q_HIGH))


def calibrate(model: TripletModel, validation_images) -> CalibrationStats:
    g, l = [], []
    for img in validation_images:
        gm, lm = raw_maps(model, img)
        g.append(gm)
        l.append(lm)
    if not g:
        raise ValueError("calibration needs at least one validation image")
    stats = CalibrationStats(fit_branch(g), fit_branch(l))
    if stats.degenerate:
        warnings.warn("calibration quantiles coincide; maps will be constant 0.5", RuntimeWarning, stacklevel=2)
    return stats


def normalize_map(raw, stats: BranchStats, sigmoid: bool = True) -> np.ndarray:
    """Quantile-normalize then squash into (0, 1).

    With ``sigmoid=False`` the unbounded linear rescaling ``0.1 (x - q_low) /
    (q_high - q_low)`` is returned instead.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if stats.degenerate:
        warnings.warn("degenerate calibration stats; returning a constant 0.5 map", RuntimeWarning, stacklevel=2)
        return np.full(raw.shape, 0.5)
    z = (raw - stats.q_low) / (stats.q_high - stats.q_low)
    if not sigmoid:
        return 0.1 * z
    return np.clip(_sigmoid_np(z), np.finfo(np.float64).tiny, _BELOW_ONE)


def combine(global_norm, local_norm) -> np.ndarray:
    g, l = np.asarray(global_norm), np.asarray(local_norm)
    if g.shape != l.shape:
        raise ShapeError(f"maps differ in shape: {g.shape} vs {l.shape}")
    return 0.5 * (g + l)


def image_score(values) -> float:
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty map")
    return float(v.max())


def upsample(values: np.ndarray, h: int, w: int) -> np.ndarray:
    return bilinear_resize(Tensor(np.asarray(values, dtype=np.float64)[None]), h, w).data[0]


def score_image(model: TripletModel, stats: CalibrationStats, image, sigmoid: bool = True, branch: str = "combined"):
    """Pixel anomaly map at image resolution and the image-level score."""
    gm, lm = raw_maps(model, image)
    g = normalize_map(gm, stats.global_, sigmoid)
    l = normalize_map(lm, stats.local, sigmoid)
    m = {"combined": lambda: combine(g, l), "global": lambda: g, "local": lambda: l}[branch]()
    h, w = np.asarray(image).shape[1:]
    up = upsample(m, h, w)
    return AnomalyMap(up, m.shape, branch), image_score(up)


# -- map export --------------------------------------------------------------------

def export_maps(maps: dict, out_dir, extra: dict | None = None):
    """Write one little-endian float32 plane per image plus ``manifest.json``.

    ``maps`` maps image ids to :class:`AnomalyMap`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (iid, amap) in enumerate(sorted(maps.items())):
        fname = f"map_{i:05d}.f32"
        np.ascontiguousarray(amap.values, dtype="<f4").tofile(out / fname)
        entry = {"image_id": iid, "file": fname, "shape": list(amap.values.shape),
                 "source_shape": list(amap.source_shape), "branch": amap.branch}
        if extra and iid in extra:
            entry.update(extra[iid])
        entries.append(entry)
    (out / "manifest.json").write_text(json.dumps({"maps": entries}, indent=1) + "\n")


def read_maps(maps_dir) -> list:
    """Return ``[(entry, values)]`` from an exported map directory."""
    d = Path(maps_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    out = []
    for e in manifest["maps"]:
        v = np.fromfile(d / e["file"], dtype="<f4").reshape(e["shape"])
        out.append((e, v))
    return out
