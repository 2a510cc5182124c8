"""Image pipeline, MVTec-LOCO-style directory loader and the synthetic
"pegboard" dataset generator."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autograd import Tensor, bilinear_resize
from .errors import ConfigError, DatasetError, MissingPathError, OrphanMaskError, SpecError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

LABELS = {"good": "good", "logical_anomalies": "logical_anomaly", "structural_anomalies": "structural_anomaly"}
DEFECT_DIRS = ("logical_anomalies", "structural_anomalies")
CONFIG_NAME = "defects_config.json"
INVENTORY_NAME = "inventory.csv"


@dataclass(eq=False)
class DefectAnnotation:
    mask: np.ndarray
    saturation_area: float
    defect_type: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        area = int(self.mask.sum())
        if area == 0:
            raise DatasetError("defect region is empty")
        if not 1 <= self.saturation_area <= area:
            raise DatasetError(f"saturation area {self.saturation_area} outside [1, {area}]")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(eq=False)
class Sample:
    image_id: str
    split: str
    label: str
    pixels: np.ndarray  # H x W x 3 uint8
    annotations: list = field(default_factory=list)
    subtype: str = ""

    def same_as(self, other: "Sample") -> bool:
        if (self.image_id, self.split, self.label, self.subtype) != (
                other.image_id, other.split, other.label, other.subtype):
            return False
        if not np.array_equal(self.pixels, other.pixels) or len(self.annotations) != len(other.annotations):
            return False
        return all(
            np.array_equal(a.mask, b.mask) and a.saturation_area == b.saturation_area
            and a.defect_type == b.defect_type
            for a, b in zip(self.annotations, other.annotations)
        )


# -- preprocessing -------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DatasetError(f"{path}: expected a 3-channel RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from None


def preprocess(raw, size: int = 256) -> np.ndarray:
    """Resize to ``size`` x ``size``, scale to [0, 1], standardize per channel.

    ``raw`` is an H x W x 3 uint8 array or a path to an image file.
    """
    if isinstance(raw, (str, Path)):
        raw = read_image(raw)
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DatasetError(f"expected an H x W x 3 image, got shape {raw.shape}")
    x = raw.astype(np.float64).transpose(2, 0, 1)
    x = bilinear_resize(Tensor(x), size, size).data / 255.0
    x = (x - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]
    return x.astype(np.float32)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(bool)
    img = Image.fromarray(mask.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)
    return np.asarray(img) > 127


# -- defect configuration ------------------------------------------------------

def saturation_area(region_area: int, mode: str, value: float) -> float:
    if mode == "relative":
        s = value * region_area
    elif mode == "absolute":
        s = value
    else:
        raise ConfigError(f"unknown saturation_mode {mode!r}")
    return float(min(max(s, 1.0), region_area))


def read_defect_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"missing defect configuration: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed defect configuration ({exc})") from None
    out = {}
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: expected a list of defect entries")
    for e in entries:
        try:
            name, mode, value = e["defect_type"], e["saturation_mode"], float(e["saturation_value"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{path}: entry {e!r} needs defect_type, saturation_mode, saturation_value") from None
        if mode not in ("absolute", "relative") or value <= 0:
            raise ConfigError(f"{path}: bad saturation rule for {name!r}: {mode} {value}")
        out[name] = (mode, value)
    return out


def write_defect_config(path, rules: dict):
    entries = [{"defect_type": k, "saturation_mode": m, "saturation_value": v} for k, (m, v) in sorted(rules.items())]
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


# -- loader ----------------------------------------------------------------------

def _pngs(d: Path) -> list:
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def _require_nonempty(d: Path) -> list:
    if not d.is_dir():
        raise MissingPathError(f"missing directory: {d}")
    files = _pngs(d)
    if not files:
        raise MissingPathError(f"no images in directory: {d}")
    return files


def load_loco_layout(root) -> list:
    """Index a category directory laid out like MVTec LOCO AD.

    Returns a list of :class:`Sample` ordered train, validation, test.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingPathError(f"dataset root does not exist: {root}")
    rules = read_defect_config(root / CONFIG_NAME)
    subtypes = {}
    inv = root / INVENTORY_NAME
    if inv.is_file():
        with open(inv, newline="") as fh:
            subtypes = {r["image_id"]: r["subtype"] for r in csv.DictReader(fh)}

    samples = []
    for split in ("train", "validation"):
        for p in _require_nonempty(root / split / "good"):
            iid = f"{split}/good/{p.stem}"
            samples.append(Sample(iid, split, "good", read_image(p), [], subtypes.get(iid, "")))
    for p in _require_nonempty(root / "test" / "good"):
        iid = f"test/good/{p.stem}"
        samples.append(Sample(iid, "test", "good", read_image(p), [], subtypes.get(iid, "")))

    gt_root = root / "ground_truth"
    for dtype in DEFECT_DIRS:
        files = _require_nonempty(root / "test" / dtype)
        if dtype not in rules:
            raise ConfigError(f"{root / CONFIG_NAME}: no saturation rule for {dtype!r}")
        mode, value = rules[dtype]
        stems = {p.stem for p in files}
        gt_dir = gt_root / dtype
        if not gt_dir.is_dir():
            raise MissingPathError(f"missing directory: {gt_dir}")
        orphans = sorted(str(d) for d in gt_dir.iterdir() if d.is_dir() and d.name not in stems)
        if orphans:
            raise OrphanMaskError(f"ground-truth masks without a test image: {orphans}")
        for p in files:
            mask_dir = gt_dir / p.stem
            masks = _pngs(mask_dir) if mask_dir.is_dir() else []
            if not masks:
                raise MissingPathError(f"no ground-truth masks for {p}: expected {mask_dir}/*.png")
            image = read_image(p)
            anns = []
            for mp in masks:
                with Image.open(mp) as im:
                    m = np.asarray(im.convert("L")) > 127
                if m.shape != image.shape[:2]:
                    raise DatasetError(f"{mp}: mask shape {m.shape} != image shape {image.shape[:2]}")
                anns.append(DefectAnnotation(m, saturation_area(int(m.sum()), mode, value), dtype))
            iid = f"test/{dtype}/{p.stem}"
            samples.append(Sample(iid, "test", LABELS[dtype], image, anns, subtypes.get(iid, "")))
    return samples


def split(samples, name: str) -> list:
    return [s for s in samples if s.split == name]


# -- synthetic pegboard generator --------------------------------------------------

PALETTE = {
    "red": (200, 45, 40),
    "green": (45, 165, 70),
    "blue": (50, 75, 205),
    "yellow": (225, 200, 45),
}
# a bottom square must carry the partner colour of the square above it
PAIRING = {"red": "green", "green": "blue", "blue": "yellow", "yellow": "red"}
LOGICAL_KINDS = ("missing", "extra", "misplaced", "mismatched")
STRUCTURAL_KINDS = ("scratch", "blot")
BACKGROUND = 150
DEFECT_COLOR = (35, 28, 22)


@dataclass(frozen=True)
class MiniLocoSpec:
    canvas: int = 256
    n_train: int = 200
    n_validation: int = 40
    n_test_good: int = 40
    n_logical: int = 40
    n_structural: int = 40
    logical_kinds: tuple = LOGICAL_KINDS
    structural_kinds: tuple = STRUCTURAL_KINDS
    # fraction of a quadrant's side kept free around its legal area
    margin_fraction: float = 0.25
    object_fraction: float = 0.12
    extra_fraction: float = 0.6
    noise_level: float = 4.0
    brightness_jitter: float = 8.0
    color_jitter: float = 10.0
    saturation_mode: str = "relative"
    saturation_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "logical_kinds", tuple(self.logical_kinds))
        object.__setattr__(self, "structural_kinds", tuple(self.structural_kinds))
        if not self.logical_kinds:
            raise SpecError("at least one logical rule must be active")
        bad = set(self.logical_kinds) - set(LOGICAL_KINDS)
        bad |= set(self.structural_kinds) - set(STRUCTURAL_KINDS)
        if bad:
            raise SpecError(f"unknown anomaly kinds: {sorted(bad)}")
        if self.canvas < 16 or self.canvas % 4:
            raise SpecError(f"canvas must be a multiple of 4 and >= 16, got {self.canvas}")
        if min(self.n_train, self.n_validation, self.n_test_good) < 1:
            raise SpecError("train, validation and test/good need at least one image each")
        if self.n_logical < 1 or self.n_structural < 1:
            raise SpecError("need at least one logical and one structural anomaly")
        g = self.geometry()
        if g["legal"] < g["size"] + 2 + g["extra"]:
            raise SpecError("legal area too small to host an object plus an extra one")
        if g["margin"] < g["size"]:
            raise SpecError("margin band too narrow to host a misplaced object")
        if self.saturation_mode not in ("relative", "absolute") or self.saturation_value <= 0:
            raise SpecError("bad saturation rule")

    def geometry(self) -> dict:
        q = self.canvas // 2
        margin = int(round(self.margin_fraction * q))
        size = max(3, int(round(self.object_fraction * self.canvas)))
        return {
            "quadrant": q,
            "margin": margin,
            "legal": q - 2 * margin,
            "size": size,
            "extra": max(2, int(round(self.extra_fraction * size))),
        }

    @classmethod
    def fast(cls, **kw) -> "MiniLocoSpec":
        """64 x 64 profile used by tests and desk-scale experiments."""
        return cls(canvas=64, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["logical_kinds"] = list(self.logical_kinds)
        d["structural_kinds"] = list(self.structural_kinds)
        return d


QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))  # (row, col): top-left, top-right, bottom-left, bottom-right


def legal_box(spec: MiniLocoSpec, quad) -> tuple:
    """(y0, x0, y1, x1) of a quadrant's legal area, end-exclusive."""
    g = spec.geometry()
    r, c = quad
    y0 = r * g["quadrant"] + g["margin"]
    x0 = c * g["quadrant"] + g["margin"]
    return y0, x0, y0 + g["legal"], x0 + g["legal"]


def _normal_layout(rng, spec: MiniLocoSpec) -> list:
    g = spec.geometry()
    names = list(PALETTE)
    objs = []
    top = [names[rng.integers(len(names))] for _ in range(2)]
    for quad in QUADRANTS:
        color = top[quad[1]] if quad[0] == 0 else PAIRING[top[quad[1]]]
        y0, x0, _, _ = legal_box(spec, quad)
        span = g["legal"] - g["size"]
        objs.append({"quad": quad, "y": y0 + int(rng.integers(span + 1)), "x": x0 + int(rng.integers(span + 1)),
                     "size": g["size"], "color": color})
    return objs


def _box_mask(n, y, x, size) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    m[y:y + size, x:x + size] = True
    return m


def _apply_logical(rng, spec: MiniLocoSpec, objs: list, kind: str):
    """Mutate ``objs`` to break exactly one rule; return the ground-truth mask."""
    g = spec.geometry()
    n = spec.canvas
    k = int(rng.integers(4))
    obj = objs[k]
    quad = obj["quad"]
    y0, x0, y1, x1 = legal_box(spec, quad)
    if kind == "missing":
        objs.pop(k)
        m = np.zeros((n, n), dtype=bool)
        m[y0:y1, x0:x1] = True
        return m
    if kind == "extra":
        # push the original against one side of its legal area, put the extra one on the other
        axis = int(rng.integers(2))
        first = bool(rng.integers(2))
        lo, hi = (y0, y1) if axis == 0 else (x0, x1)
        pos = lo if first else hi - g["size"]
        if axis == 0:
            obj["y"] = pos
        else:
            obj["x"] = pos
        free_lo = pos + g["size"] + 2 if first else lo
        free_hi = hi - g["extra"] if first else pos - 2 - g["extra"]
        along = free_lo + int(rng.integers(free_hi - free_lo + 1))
        other_lo, other_hi = (x0, x1) if axis == 0 else (y0, y1)
        across = other_lo + int(rng.integers(other_hi - other_lo - g["extra"] + 1))
        ey, ex = (along, across) if axis == 0 else (across, along)
        color = list(PALETTE)[int(rng.integers(len(PALETTE)))]
        objs.append({"quad": quad, "y": ey, "x": ex, "size": g["extra"], "color": color})
        return _box_mask(n, ey, ex, g["extra"])
    if kind == "misplaced":
        q = g["quadrant"]
        qy, qx = quad[0] * q, quad[1] * q
        band = ("top", "bottom", "left", "right")[int(rng.integers(4))]
        s = g["size"]
        along = int(rng.integers(q - s + 1))
        off = int(rng.integers(g["margin"] - s + 1))
        if band == "top":
            obj["y"], obj["x"] = qy + off, qx + along
        elif band == "bottom":
            obj["y"], obj["x"] = qy + q - s - off, qx + along
        elif band == "left":
            obj["y"], obj["x"] = qy + along, qx + off
        else:
            obj["y"], obj["x"] = qy + along, qx + q - s - off
        return _box_mask(n, obj["y"], obj["x"], s)
    if kind == "mismatched":
        bottom = [o for o in objs if o["quad"][0] == 1]
        target = bottom[int(rng.integers(len(bottom)))]
        above = next(o for o in objs if o["quad"] == (0, target["quad"][1]))
        wrong = [c for c in PALETTE if c != PAIRING[above["color"]]]
        target["color"] = wrong[int(rng.integers(len(wrong)))]
        return _box_mask(n, target["y"], target["x"], target["size"])
    raise SpecError(f"unknown logical anomaly kind {kind!r}")


def _render(rng, spec: MiniLocoSpec, objs: list) -> np.ndarray:
    n = spec.canvas
    base = BACKGROUND + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    img = np.full((n, n, 3), base, dtype=np.float64)
    for o in objs:
        color = np.array(PALETTE[o["color"]], dtype=np.float64) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        img[o["y"]:o["y"] + o["size"], o["x"]:o["x"] + o["size"]] = color
    img += rng.normal(0.0, spec.noise_level, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _structural(rng, spec: MiniLocoSpec, img: np.ndarray, kind: str):
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n]
    if kind == "scratch":
        p0 = rng.uniform(0.1 * n, 0.9 * n, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(0.25 * n, 0.5 * n)
        p1 = np.clip(p0 + length * np.array([np.sin(ang), np.cos(ang)]), 0, n - 1)
        half = max(0.5, n / 128)
        d = p1 - p0
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
        dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
        mask = dist <= half
    elif kind == "blot":
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, 2)
        ry, rx = rng.uniform(0.03 * n, 0.07 * n, 2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        raise SpecError(f"unknown structural anomaly kind {kind!r}")
    if not mask.any():
        mask[int(n // 2), int(n // 2)] = True
    out = img.copy()
    out[mask] = DEFECT_COLOR
    return out, mask


def _plan(spec: MiniLocoSpec) -> list:
    """(split, folder, index, kind) for every image, in a fixed order."""
    plan = []
    for i in range(spec.n_train):
        plan.append(("train", "good", i, ""))
    for i in range(spec.n_validation):
        plan.append(("validation", "good", i, ""))
    for i in range(spec.n_test_good):
        plan.append(("test", "good", i, ""))
    for i in range(spec.n_logical):
        plan.append(("test", "logical_anomalies", i, spec.logical_kinds[i % len(spec.logical_kinds)]))
    for i in range(spec.n_structural):
        plan.append(("test", "structural_anomalies", i, spec.structural_kinds[i % len(spec.structural_kinds)]))
    return plan


_SPLIT_CODE = {"train": 0, "validation": 1, "good": 2, "logical_anomalies": 3, "structural_anomalies": 4}


def render_sample(spec: MiniLocoSpec, split_name: str, folder: str, idx: int, kind: str):
    """Render one image; returns ``(pixels, masks, objects)``."""
    code = _SPLIT_CODE[split_name] if split_name != "test" else _SPLIT_CODE[folder]
    rng = np.random.default_rng([spec.seed, code, idx])
    objs = _normal_layout(rng, spec)
    masks = []
    if folder == "logical_anomalies":
        masks.append(_apply_logical(rng, spec, objs, kind))
    img = _render(rng, spec, objs)
    if folder == "structural_anomalies":
        img, m = _structural(rng, spec, img, kind)
        masks.append(m)
    return img, masks, objs


def gen_mini_loco(spec: MiniLocoSpec, out_dir) -> list:
    """Write a pegboard dataset in LOCO layout under ``out_dir``; return its index."""
    out = Path(out_dir)
    rules = {d: (spec.saturation_mode, spec.saturation_value) for d in DEFECT_DIRS}
    samples = []
    for split_name, folder, idx, kind in _plan(spec):
        img, masks, _ = render_sample(spec, split_name, folder, idx, kind)
        stem = f"{idx:03d}"
        d = out / split_name / folder
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(d / f"{stem}.png")
        anns = []
        if masks:
            md = out / "ground_truth" / folder / stem
            md.mkdir(parents=True, exist_ok=True)
            for j, m in enumerate(masks):
                Image.fromarray(m.astype(np.uint8) * 255).save(md / f"{j:03d}.png")
                mode, value = rules[folder]
                anns.append(DefectAnnotation(m, saturation_area(int(m.sum()), mode, value), folder))
        samples.append(Sample(f"{split_name}/{folder}/{stem}", split_name, LABELS[folder], img, anns, kind))
    write_defect_config(out / CONFIG_NAME, rules)
    with open(out / INVENTORY_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "split", "label", "subtype"])
        for s in samples:
            w.writerow([s.image_id, s.split, s.label, s.subtype])
    (out / "generator_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return samples
