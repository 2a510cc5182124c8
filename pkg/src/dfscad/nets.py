"""Teacher / dual-head student / auto-encoder networks and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    ShapeError,
)

FORMAT_VERSION = 1
MAGIC = b"DFSCKPT\x00"
DTYPE = np.float32


@dataclass(frozen=True)
class PdnConfig:
    """Patch description network layout. Spatial downsampling is fixed at 4."""

    in_channels: int = 3
    out_channels: int = 64
    widths: tuple = (32, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("PdnConfig: channel counts must be >= 1")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError("PdnConfig: widths must hold three positive hidden sizes")


@dataclass(frozen=True)
class ModelConfig:
    pdn: PdnConfig = field(default_factory=PdnConfig)
    image_size: int = 256
    ae_width: int = 32
    ae_latent: int = 64
    # IN before every auto-encoder activation plus a leading decoder ReLU
    instance_norm_relu: bool = True
    # False: one trunk emitting 2C channels; True: two independent PDN heads
    separate_student_heads: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.pdn, dict):
            object.__setattr__(self, "pdn", PdnConfig(**self.pdn))
        n = self.image_size
        if n < 8 or n & (n - 1):
            raise ValueError(f"ModelConfig: image_size must be a power of two >= 8, got {n}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pdn"]["widths"] = list(self.pdn.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pdn"] = PdnConfig(**d["pdn"])
        return cls(**d)


# -- parameter construction -------------------------------------------------

def _conv_params(rng, prefix, c_in, c_out, k, params):
    fan_in = c_in * k * k
    params[f"{prefix}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(DTYPE)
    params[f"{prefix}.bias"] = np.zeros(c_out, dtype=DTYPE)


def _norm_params(prefix, c, params):
    params[f"{prefix}.gamma"] = np.ones(c, dtype=DTYPE)
    params[f"{prefix}.beta"] = np.zeros(c, dtype=DTYPE)


# (kernel, padding) of the four PDN convolutions; 2x2 average pools follow
# the first two. Output spatial size is exactly input / 4.
PDN_LAYOUT = ((4, 2), (4, 1), (3, 1), (4, 2))


def init_pdn(rng, cfg: PdnConfig, out_channels: int, prefix: str) -> dict:
    params = {}
    chans = (cfg.in_channels, *cfg.widths, out_channels)
    for i, (k, _) in enumerate(PDN_LAYOUT):
        _conv_params(rng, f"{prefix}.conv{i + 1}", chans[i], chans[i + 1], k, params)
    return params


def encoder_depth(image_size: int) -> int:
    return int(round(math.log2(image_size)))


def decoder_depth(image_size: int) -> int:
    return int(round(math.log2(image_size // 4)))


def init_autoencoder(rng, cfg: ModelConfig) -> dict:
    params = {}
    n_enc = encoder_depth(cfg.image_size)
    c = cfg.pdn.in_channels
    for i in range(n_enc):
        last = i == n_enc - 1
        c_out = cfg.ae_latent if last else cfg.ae_width
        _conv_params(rng, f"ae.enc{i + 1}", c, c_out, 3, params)
        if not last:
            _norm_params(f"ae.enc{i + 1}.norm", c_out, params)
        c = c_out
    for i in range(decoder_depth(cfg.image_size)):
        _conv_params(rng, f"ae.dec{i + 1}", c, cfg.ae_width, 3, params)
        _norm_params(f"ae.dec{i + 1}.norm", cfg.ae_width, params)
        c = cfg.ae_width
    _conv_params(rng, "ae.out", c, cfg.pdn.out_channels, 3, params)
    return params


def _as_tensors(arrays: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


class TripletModel:
    """Frozen teacher, trainable dual-head student and auto-encoder.

    ``student_shadow`` is the exponential moving average of the student used
    at inference time.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        c = config.pdn.out_channels
        teacher = init_pdn(np.random.default_rng(seeds[0]), config.pdn, c, "teacher")
        rng_s = np.random.default_rng(seeds[1])
        if config.separate_student_heads:
            student = init_pdn(rng_s, config.pdn, c, "student.st")
            student.update(init_pdn(rng_s, config.pdn, c, "student.sa"))
        else:
            student = init_pdn(rng_s, config.pdn, 2 * c, "student")
        ae = init_autoencoder(np.random.default_rng(seeds[2]), config)

        self.teacher = _as_tensors(teacher, False)
        self.student = _as_tensors(student, True)
        self.autoencoder = _as_tensors(ae, True)
        self.student_shadow = {k: v.copy() for k, v in student.items()}
        # channel statistics used to standardize teacher features
        self.teacher_mean = np.zeros(c, dtype=DTYPE)
        self.teacher_std = np.ones(c, dtype=DTYPE)
        self.step = 0

    def trainable(self) -> dict:
        return {**self.student, **self.autoencoder}

    def arrays(self) -> dict:
        """Every stored array, keyed by its checkpoint name."""
        out = {k: v.data for k, v in self.teacher.items()}
        out.update({k: v.data for k, v in self.student.items()})
        out.update({k: v.data for k, v in self.autoencoder.items()})
        out.update({f"shadow.{k}": v for k, v in self.student_shadow.items()})
        out["teacher_norm.mean"] = self.teacher_mean
        out["teacher_norm.std"] = self.teacher_std
        return out

    def set_arrays(self, arrays: dict):
        expected = self.arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise CheckpointShapeError(f"array names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in arrays.items():
            if v.shape != expected[k].shape:
                raise CheckpointShapeError(f"array {k!r}: stored shape {v.shape} != expected {expected[k].shape}")
        for group in (self.teacher, self.student, self.autoencoder):
            for k in group:
                group[k].data = arrays[k].astype(DTYPE, copy=True)
        for k in self.student_shadow:
            self.student_shadow[k] = arrays[f"shadow.{k}"].astype(DTYPE, copy=True)
        self.teacher_mean = arrays["teacher_norm.mean"].astype(DTYPE, copy=True)
        self.teacher_std = arrays["teacher_norm.std"].astype(DTYPE, copy=True)


# -- forward passes ------------------------------------------------------------

def _as_image(image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=DTYPE))
    if x.ndim != 3:
        raise ShapeError(f"expected a 3 x H x W image, got shape {x.shape}")
    return x


def _check_divisible(x: Tensor):
    _, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image height/width must be divisible by 4, got {h}x{w}")


def pdn_forward(params: dict, prefix: str, x: Tensor) -> Tensor:
    for i, (_, pad) in enumerate(PDN_LAYOUT):
        name = f"{prefix}.conv{i + 1}"
        x = ag.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=pad)
        if i < 3:
            x = ag.relu(x)
        if i < 2:
            x = ag.avg_pool2d(x, 2, 2)
    return x


def teacher_forward(model: TripletModel, image) -> Tensor:
    """Standardized teacher features; never part of a gradient graph."""
    x = _as_image(image).detach()
    _check_divisible(x)
    out = pdn_forward(model.teacher, "teacher", x).data
    out = (out - model.teacher_mean[:, None, None]) / model.teacher_std[:, None, None]
    return Tensor(out.astype(DTYPE))


def _student(params: dict, cfg: ModelConfig, x: Tensor):
    _check_divisible(x)
    c = cfg.pdn.out_channels
    if cfg.separate_student_heads:
        return pdn_forward(params, "student.st", x), pdn_forward(params, "student.sa", x)
    out = pdn_forward(params, "student", x)
    return out[:c], out[c:]


def student_forward(model: TripletModel, image):
    """Return ``(S_T, S_A)``: the teacher-imitating and auto-encoder-imitating halves."""
    return _student(model.student, model.config, _as_image(image))


def student_trunk(model: TripletModel, image) -> Tensor:
    """Raw 2C-channel output of the shared student trunk."""
    if model.config.separate_student_heads:
        raise ValueError("student has separate heads; there is no shared trunk")
    x = _as_image(image)
    _check_divisible(x)
    return pdn_forward(model.student, "student", x)


def ema_shadow_forward(model: TripletModel, image):
    params = {k: Tensor(v) for k, v in model.student_shadow.items()}
    return _student(params, model.config, _as_image(image))


def autoencoder_forward(model: TripletModel, image, return_latent: bool = False):
    cfg = model.config
    p = model.autoencoder
    x = _as_image(image)
    _check_divisible(x)
    if x.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"auto-encoder expects {cfg.image_size}x{cfg.image_size} input, got {x.shape[1]}x{x.shape[2]}")
    use_in = cfg.instance_norm_relu
    n_enc = encoder_depth(cfg.image_size)
    for i in range(n_enc):
        name = f"ae.enc{i + 1}"
        x = ag.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=2, padding=1)
        if i < n_enc - 1:
            if use_in:
                x = ag.instance_norm(x, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
            x = ag.relu(x)
    latent = x
    # instance norm over a 1x1 bottleneck is degenerate, so the leading ReLU stands alone
    if use_in:
        x = ag.relu(x)
    for i in range(decoder_depth(cfg.image_size)):
        name = f"ae.dec{i + 1}"
        x = ag.bilinear_resize(x, 2 * x.shape[1], 2 * x.shape[2])
        x = ag.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
        if use_in:
            x = ag.instance_norm(x, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
        x = ag.relu(x)
    x = ag.conv2d(x, p["ae.out.weight"], p["ae.out.bias"], padding=1)
    return (x, latent) if return_latent else x


# -- checkpoints ---------------------------------------------------------------

def save_model(model: TripletModel, path, extra_arrays: dict | None = None, extra_meta: dict | None = None):
    """Write the model (and optional optimizer state) to a single checkpoint file.

    Layout: magic, u32 manifest length, UTF-8 JSON manifest, raw little-endian
    float32 payload.
    """
    arrays = dict(model.arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "step": model.step,
        "payload_bytes": offset,
        "arrays": entries,
        "meta": extra_meta or {},
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    head = len(MAGIC) + 4
    if len(raw) < head:
        raise CheckpointFormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[len(MAGIC):head])
    try:
        manifest = json.loads(raw[head:head + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = raw[head + n:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointFormatError(
            f"{path}: truncated payload ({len(payload)} of {manifest['payload_bytes']} bytes)")
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(DTYPE)
    return manifest, arrays


def _config_diff(expected: dict, got: dict, prefix="") -> list:
    diffs = []
    for k in sorted(set(expected) | set(got)):
        a, b = expected.get(k), got.get(k)
        if isinstance(a, dict) and isinstance(b, dict):
            diffs += _config_diff(a, b, f"{prefix}{k}.")
        elif a != b:
            diffs.append(f"{prefix}{k}")
    return diffs


def load_model(path, config: ModelConfig | None = None, return_extra: bool = False):
    manifest, arrays = read_checkpoint(path)
    stored = ModelConfig.from_dict(manifest["config"])
    if config is not None:
        diffs = _config_diff(config.to_dict(), stored.to_dict())
        if diffs:
            raise CheckpointShapeError(f"{path}: config mismatch in field(s) {', '.join(diffs)}")
    model = TripletModel(stored)
    names = set(model.arrays())
    model.set_arrays({k: v for k, v in arrays.items() if k in names})
    model.step = int(manifest["step"])
    if return_extra:
        extra = {k: v for k, v in arrays.items() if k not in names}
        return model, extra, manifest.get("meta", {})
    return model
