"""Flat ``key = value`` run configuration shared by every command."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .datasets import MiniLocoSpec
from .errors import ConfigError, SpecError
from .losses import LossWeights
from .nets import ModelConfig, PdnConfig
from .trainer import TrainConfig

DATA_ENV = "DFSCAD_DATA"

# overrides applied by ``profile`` before the config file and the flags
PROFILES = {
    "desk": {},
    "fast": {"image_size": 64, "channels": 32, "canvas": 64},
}


def _meta(section: str, help_: str) -> dict:
    return {"section": section, "help": help_}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run in one flat namespace."""

    profile: str = dataclasses.field(default="desk", metadata=_meta("run", "desk (256 px, C=64) or fast (64 px, C=32)"))
    seed: int = dataclasses.field(default=0, metadata=_meta("run", "seed for initialization and the training stream"))
    # model
    image_size: int = dataclasses.field(default=256, metadata=_meta("model", "network input side length (power of two)"))
    channels: int = dataclasses.field(default=64, metadata=_meta("model", "feature channels C of teacher and student heads"))
    widths: str = dataclasses.field(default="32,64,64", metadata=_meta("model", "hidden widths of the PDN, comma separated"))
    ae_width: int = dataclasses.field(default=32, metadata=_meta("model", "auto-encoder hidden width"))
    ae_latent: int = dataclasses.field(default=64, metadata=_meta("model", "auto-encoder bottleneck channels"))
    separate_student_heads: bool = dataclasses.field(default=False, metadata=_meta("model", "two student networks instead of one 2C trunk"))
    # optimization
    lr: float = dataclasses.field(default=1e-4, metadata=_meta("train", "peak learning rate"))
    weight_decay: float = dataclasses.field(default=1e-5, metadata=_meta("train", "decoupled weight decay"))
    iterations: int = dataclasses.field(default=2000, metadata=_meta("train", "training steps (batch size 1)"))
    warmup_beta2: float = dataclasses.field(default=0.997, metadata=_meta("train", "exponential warmup constant"))
    lr_drop_fraction: float = dataclasses.field(default=0.9, metadata=_meta("train", "fraction of steps after which the lr drops"))
    lr_drop_factor: float = dataclasses.field(default=0.1, metadata=_meta("train", "lr multiplier after the drop"))
    ema_momentum: float = dataclasses.field(default=0.99, metadata=_meta("train", "EMA momentum of the student shadow"))
    adam_beta1: float = dataclasses.field(default=0.9, metadata=_meta("train", "AdamW first-moment coefficient"))
    adam_beta2: float = dataclasses.field(default=0.999, metadata=_meta("train", "AdamW second-moment coefficient"))
    adam_eps: float = dataclasses.field(default=1e-8, metadata=_meta("train", "AdamW epsilon"))
    checkpoint_every: int = dataclasses.field(default=0, metadata=_meta("train", "checkpoint period in steps (0: every 10%%)"))
    # loss
    alpha: float = dataclasses.field(default=2.0, metadata=_meta("loss", "weight of the feature-consistency hinge"))
    margin: float = dataclasses.field(default=0.4, metadata=_meta("loss", "hinge margin m in [0, 2]"))
    q_ts: float = dataclasses.field(default=0.999, metadata=_meta("loss", "hard-mining quantile for teacher/student"))
    q_ta: float = dataclasses.field(default=0.999, metadata=_meta("loss", "mask quantile for teacher/auto-encoder"))
    dfsc_reduction: str = dataclasses.field(default="active", metadata=_meta("loss", "hinge averaging: active, spatial or literal"))
    dfsc_order: str = dataclasses.field(default="mask_first", metadata=_meta("loss", "mask_first or normalize_first"))
    sa_stop_grad: bool = dataclasses.field(default=False, metadata=_meta("loss", "stop gradients of d_sa into the auto-encoder"))
    # ablation toggles
    instance_norm_relu: bool = dataclasses.field(default=True, metadata=_meta("toggles", "instance norm + leading ReLU in the auto-encoder"))
    sigmoid_projection: bool = dataclasses.field(default=True, metadata=_meta("toggles", "sigmoid projection of normalized maps"))
    dfsc: bool = dataclasses.field(default=True, metadata=_meta("toggles", "add the feature-consistency hinge to the loss"))
    momentum_update: bool = dataclasses.field(default=True, metadata=_meta("toggles", "EMA student shadow for inference"))
    ema_inplace: bool = dataclasses.field(default=False, metadata=_meta("toggles", "blend the online student in place"))
    # teacher pretraining
    teacher_iterations: int = dataclasses.field(default=500, metadata=_meta("teacher", "teacher distillation steps"))
    teacher_lr: float = dataclasses.field(default=1e-3, metadata=_meta("teacher", "teacher distillation learning rate"))
    # synthetic data
    canvas: int = dataclasses.field(default=256, metadata=_meta("data", "generated image side length"))
    n_train: int = dataclasses.field(default=200, metadata=_meta("data", "training images"))
    n_validation: int = dataclasses.field(default=40, metadata=_meta("data", "validation images"))
    n_test_good: int = dataclasses.field(default=40, metadata=_meta("data", "normal test images"))
    n_logical: int = dataclasses.field(default=40, metadata=_meta("data", "logical anomalies"))
    n_structural: int = dataclasses.field(default=40, metadata=_meta("data", "structural anomalies"))
    logical_kinds: str = dataclasses.field(default="missing,extra,misplaced,mismatched", metadata=_meta("data", "active logical rules"))
    structural_kinds: str = dataclasses.field(default="scratch,blot", metadata=_meta("data", "structural defect kinds"))
    margin_fraction: float = dataclasses.field(default=0.25, metadata=_meta("data", "free band around each legal area"))
    object_fraction: float = dataclasses.field(default=0.12, metadata=_meta("data", "object side relative to the canvas"))
    extra_fraction: float = dataclasses.field(default=0.6, metadata=_meta("data", "extra-object side relative to an object"))
    noise_level: float = dataclasses.field(default=4.0, metadata=_meta("data", "pixel noise standard deviation"))
    brightness_jitter: float = dataclasses.field(default=8.0, metadata=_meta("data", "per-image brightness jitter"))
    color_jitter: float = dataclasses.field(default=10.0, metadata=_meta("data", "per-object colour jitter"))
    saturation_mode: str = dataclasses.field(default="relative", metadata=_meta("data", "relative or absolute saturation rule"))
    saturation_value: float = dataclasses.field(default=0.5, metadata=_meta("data", "saturation fraction or pixel count"))
    data_seed: int = dataclasses.field(default=0, metadata=_meta("data", "generator seed"))

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        try:
            self.widths_tuple
        except ValueError:
            raise ConfigError(f"widths must be three comma-separated integers, got {self.widths!r}") from None
        # delegate range checks to the component configs
        self.loss_weights()
        self.train_config()
        self.model_config()

    @property
    def widths_tuple(self) -> tuple:
        w = tuple(int(v) for v in self.widths.split(","))
        if len(w) != 3:
            raise ValueError(self.widths)
        return w

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, margin=self.margin, q_ts=self.q_ts, q_ta=self.q_ta,
                           dfsc_reduction=self.dfsc_reduction, dfsc_order=self.dfsc_order,
                           sa_stop_grad=self.sa_stop_grad)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, iterations=self.iterations,
                           warmup_beta2=self.warmup_beta2, lr_drop_fraction=self.lr_drop_fraction,
                           lr_drop_factor=self.lr_drop_factor, ema_momentum=self.ema_momentum,
                           weights=self.loss_weights(), seed=self.seed, adam_beta1=self.adam_beta1,
                           adam_beta2=self.adam_beta2, adam_eps=self.adam_eps, dfsc=self.dfsc,
                           momentum_update=self.momentum_update, ema_inplace=self.ema_inplace,
                           checkpoint_every=self.checkpoint_every)

    def model_config(self) -> ModelConfig:
        try:
            pdn = PdnConfig(out_channels=self.channels, widths=self.widths_tuple)
            return ModelConfig(pdn=pdn, image_size=self.image_size, ae_width=self.ae_width,
                               ae_latent=self.ae_latent, instance_norm_relu=self.instance_norm_relu,
                               separate_student_heads=self.separate_student_heads, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def data_spec(self) -> MiniLocoSpec:
        return MiniLocoSpec(canvas=self.canvas, n_train=self.n_train, n_validation=self.n_validation,
                            n_test_good=self.n_test_good, n_logical=self.n_logical,
                            n_structural=self.n_structural, logical_kinds=_split_list(self.logical_kinds),
                            structural_kinds=_split_list(self.structural_kinds),
                            margin_fraction=self.margin_fraction, object_fraction=self.object_fraction,
                            extra_fraction=self.extra_fraction, noise_level=self.noise_level,
                            brightness_jitter=self.brightness_jitter, color_jitter=self.color_jitter,
                            saturation_mode=self.saturation_mode, saturation_value=self.saturation_value,
                            seed=self.data_seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Resolved configuration in the same format :func:`parse_text` reads."""
        lines, section = [], None
        for f in fields(self):
            if f.metadata["section"] != section:
                section = f.metadata["section"]
                lines.append(f"{'' if not lines else chr(10)}# [{section}]")
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in fields(RunConfig)}
SECTIONS = tuple(dict.fromkeys(f.metadata["section"] for f in fields(RunConfig)))


def _split_list(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key: str, raw: str):
    """Convert the text ``raw`` to the type of field ``key``."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELDS[key].type
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return text


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (p.strip() for p in body.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def read_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(), str(p))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the profile, then the file, then explicit overrides."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for k in (*file_values, *overrides):
        if k not in FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    profile = overrides.get("profile", file_values.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    values = {**PROFILES[profile], **file_values, **overrides, "profile": profile}
    try:
        return RunConfig(**values)
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def default_data_root() -> str | None:
    return os.environ.get(DATA_ENV)
